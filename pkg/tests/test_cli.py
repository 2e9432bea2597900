import csv

import numpy as np
import pytest

from echomotion import checkpoint as ck
from echomotion import session
from echomotion import toydata as td
from echomotion.cli import EXIT_CODES, main
from echomotion.config import Phase, load_config
from echomotion.training import branch_of

TINY_CFG = """
dim=16
heads=2
layers=2
dual_layers=1
frames=5
height=16
width=16
phase1_steps=4
phase2_steps=4
checkpoint_every=2
log_every=2
sample_steps=3
"""


def _cfg(tmp, name="run", extra=""):
    path = tmp / f"{name}.cfg"
    path.write_text(TINY_CFG + f"dataset={tmp / 'data.hmvd'}\nout_dir={tmp / name}\n" + extra)
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(tmp / "data.hmvd"), "--count", "12", "--frames", "5", "--size", "16",
                 "--seed", "3"]) == 0
    assert main(["train", "--config", _cfg(tmp), "--phase", "all"]) == 0
    return tmp


def _losses(run_dir):
    with open(run_dir / "metrics.csv", newline="") as fh:
        return [(r["step"], r["phase"], r["paradigm"], r["loss"]) for r in csv.DictReader(fh)]


def test_gen_data_deterministic_and_reports_tokens(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / f"{name}.hmvd"), "--count", "100", "--seed", "7"]) == 0
    assert (tmp_path / "a.hmvd").read_bytes() == (tmp_path / "b.hmvd").read_bytes()
    out = capsys.readouterr().out
    assert "motion_tokens/clip=867" in out and "video_tokens/clip=320" in out


def test_gen_data_rejects_bad_frames(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x.hmvd"), "--frames", "6"]) == EXIT_CODES["data"]
    assert capsys.readouterr().err.startswith("error[data]:")


def test_gen_data_unwritable_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--out", str(blocker / "x.hmvd"), "--count", "1"]) == EXIT_CODES["io"]
    assert "error[io]" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("dim=16\nwidht=3\n")
    assert main(["train", "--config", str(path)]) == EXIT_CODES["config"]
    assert "unknown config key 'widht'" in capsys.readouterr().err


def test_phase1_leaves_video_branch_at_init(work):
    cfg = load_config(_cfg(work))
    data = session.prepare(cfg, td.read_dataset(cfg.dataset))
    init = session.new_model(cfg, data)
    trained = ck.load(work / "run" / "phase1.ckpt")
    video = [n for n in init.params if branch_of(n) == "video"]
    motion = [n for n in init.params if branch_of(n) == "motion"]
    assert video and all(np.array_equal(trained.tensors[n], init.params[n].data) for n in video)
    assert any(not np.array_equal(trained.tensors[n], init.params[n].data) for n in motion)


def test_phase2_requires_phase1_checkpoint(work, capsys):
    assert main(["train", "--config", _cfg(work, "fresh"), "--phase", "2"]) == EXIT_CODES["train"]
    assert "phase-1 checkpoint" in capsys.readouterr().err


def test_skip_phase1_is_tagged(work):
    assert main(["train", "--config", _cfg(work, "skip"), "--phase", "2", "--skip-phase1"]) == 0
    lines = (work / "skip" / "metrics.log").read_text().splitlines()
    assert lines and all(line.endswith("tag=skip_phase1") for line in lines)
    assert {r[1] for r in _losses(work / "skip")} == {"2"}


def test_same_config_same_losses(work):
    assert main(["train", "--config", _cfg(work, "again"), "--phase", "all"]) == 0
    assert _losses(work / "again") == _losses(work / "run")


def test_resume_matches_uninterrupted(work):
    cfg = _cfg(work, "split", "phase2_steps=2\n")
    assert main(["train", "--config", cfg, "--phase", "all"]) == 0
    assert main(["train", "--config", cfg, "--set", "phase2_steps=4", "--resume"]) == 0
    assert _losses(work / "split") == _losses(work / "run")


def test_sample_joint_counts_and_bytes(work, capsys):
    ckpt = str(work / "run" / "phase2.ckpt")
    for name in ("j1", "j2"):
        assert main(["sample", "--ckpt", ckpt, "--mode", "joint", "--prompt-tokens", "1,2,3",
                     "--out", str(work / "out" / name)]) == 0
    out = capsys.readouterr().out
    assert "calls_per_step=2 " in out
    for ext in (".hmvd", ".ppm"):
        assert (work / "out" / f"j1{ext}").read_bytes() == (work / "out" / f"j2{ext}").read_bytes()
    rec = td.read_dataset(work / "out" / "j1.hmvd")[0]
    assert rec.video.frames.shape == (5, 16, 16, 3) and rec.motion.num_frames == 5
    assert (work / "out" / "j1.ppm").read_bytes().startswith(b"P6\n16 16\n255\n")


def test_sample_conditional_modes(work, capsys):
    ckpt = str(work / "run" / "phase2.ckpt")
    data = str(work / "data.hmvd")
    assert main(["sample", "--ckpt", ckpt, "--mode", "m2v", "--cond", data, "--out", str(work / "out" / "m")]) == 0
    assert "calls_per_step=3 " in capsys.readouterr().out
    assert main(["sample", "--ckpt", ckpt, "--mode", "v2m", "--cond", data, "--cond-index", "2",
                 "--out", str(work / "out" / "v")]) == 0
    assert "calls_per_step=2 " in capsys.readouterr().out
    src = td.read_dataset(data)[2]
    got = td.read_dataset(work / "out" / "v.hmvd")[0]
    assert np.array_equal(got.video.frames, src.video.frames)  # v2m keeps the condition video
    assert not (work / "out" / "v.ppm").exists()


def test_sample_m2v_without_condition(work, capsys):
    code = main(["sample", "--ckpt", str(work / "run" / "phase2.ckpt"), "--mode", "m2v", "--out", str(work / "x")])
    assert code == EXIT_CODES["sample"]
    assert capsys.readouterr().err.startswith("error[sample]: m2v needs --cond")


def test_sample_conditional_needs_phase2(work, capsys):
    code = main(["sample", "--ckpt", str(work / "run" / "phase1.ckpt"), "--mode", "v2m",
                 "--cond", str(work / "data.hmvd"), "--out", str(work / "x")])
    assert code == EXIT_CODES["sample"]
    assert "phase 2" in capsys.readouterr().err


def test_eval_ground_truth_is_zero(work, capsys):
    data = str(work / "data.hmvd")
    assert main(["eval", "--pred", data, "--dataset", data, "--report", str(work / "gt.csv")]) == 0
    out = capsys.readouterr().out
    assert "mpjpe=0.0\n" in out
    with open(work / "gt.csv", newline="") as fh:
        assert all(float(r["mpjpe"]) == 0.0 for r in csv.DictReader(fh))


def test_eval_report_aligned_error_below_root_aligned(work):
    report = work / "eval.csv"
    assert main(["eval", "--ckpt", str(work / "run" / "phase2.ckpt"), "--dataset", str(work / "data.hmvd"),
                 "--report", str(report), "--limit", "4"]) == 0
    with open(report, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert all(float(r["pa_rms"]) <= float(r["rms"]) + 1e-9 for r in rows)
    assert all(float(r["pa_mpjpe"]) > 0 and float(r["jerk"]) > 0 for r in rows)


def test_eval_missing_checkpoint(work, capsys):
    code = main(["eval", "--ckpt", str(work / "nope.ckpt"), "--dataset", str(work / "data.hmvd"),
                 "--report", str(work / "r.csv")])
    assert code == EXIT_CODES["checkpoint"]
    assert "error[checkpoint]" in capsys.readouterr().err


def test_inspect_attn_shape(work, capsys):
    out = work / "attn.csv"
    assert main(["inspect-attn", "--ckpt", str(work / "run" / "phase2.ckpt"), "--clip", str(work / "data.hmvd"),
                 "--layer", "1", "--out", str(out)]) == 0
    grid = np.loadtxt(out, delimiter=",")
    assert grid.shape == (2 * 4 * 4, 51 * 5)  # 2 latent frames of 4x4 patches, 51 tokens x 5 frames
    assert np.allclose(grid.sum(axis=1), 1.0, atol=1e-5)
    assert "attn_mean_offset=" in capsys.readouterr().out


def test_inspect_attn_rejects_video_only_layer(work, capsys):
    code = main(["inspect-attn", "--ckpt", str(work / "run" / "phase2.ckpt"), "--clip", str(work / "data.hmvd"),
                 "--layer", "0", "--out", str(work / "a.csv")])
    assert code == EXIT_CODES["usage"]
    assert "not a dual-modality block" in capsys.readouterr().err

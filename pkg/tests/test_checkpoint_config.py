import dataclasses

import numpy as np
import pytest

from echomotion import checkpoint as ck
from echomotion import session
from echomotion import toydata as td
from echomotion.config import (
    ConfigError,
    ModelConfig,
    Phase,
    RunConfig,
    TaskMode,
    TrainPlan,
    dump_config,
    load_config,
    parse_config_text,
)

SMALL = ModelConfig(dim=16, heads=2, layers=2, dual_layers=1, mlp_ratio=2, frames=5, height=16, width=16)


def _cfg(tmp_path, **train):
    plan = TrainPlan(lr=1e-3, checkpoint_every=3, **train)
    return RunConfig(model=SMALL, train=plan, seed=2, out_dir=str(tmp_path / "run"))


@pytest.fixture(scope="module")
def records():
    return td.gen_corpus(3, 5, frames=5, size=16)


# -- config -----------------------------------------------------------------------------


def test_default_config_is_valid():
    cfg = RunConfig().validate()
    assert (cfg.model.dim, cfg.model.layers, cfg.train.shift, cfg.sample.sample_steps) == (64, 4, 8.0, 50)


def test_dump_parse_round_trip():
    cfg = RunConfig(model=dataclasses.replace(SMALL, collision_mode=True), seed=9)
    cfg.train.paradigm_probs = (0.5, 0.25, 0.25)
    back = parse_config_text(dump_config(cfg))
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_parser_errors():
    with pytest.raises(ConfigError):
        parse_config_text("nonsense=1")
    with pytest.raises(ConfigError):
        parse_config_text("dim=sixty")
    with pytest.raises(ConfigError):
        parse_config_text("collision_mode=maybe")
    with pytest.raises(ConfigError):
        parse_config_text("just a line")


def test_parser_comments_and_overrides():
    cfg = parse_config_text("# toy\ndim = 32  # width\nheads=4\nshare_modality_weights=yes\nseed=3\n")
    assert cfg.model.dim == 32 and cfg.model.share_modality_weights and cfg.seed == 3


def test_load_config_validates(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("dual_layers=0\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_digest_ignores_out_dir():
    a, b = RunConfig(out_dir="x"), RunConfig(out_dir="y")
    assert a.digest() == b.digest()
    assert a.digest() != RunConfig(seed=1).digest()


def test_task_mode_parse():
    assert TaskMode.parse("v2m") == TaskMode.VIDEO_TO_MOTION
    assert TaskMode.parse("Motion_To_Video") == TaskMode.MOTION_TO_VIDEO
    with pytest.raises(ConfigError):
        TaskMode.parse("both")


def test_train_plan_validation():
    with pytest.raises(ConfigError):
        TrainPlan(paradigm_probs=(0.5, 0.5, 0.5)).validate()
    with pytest.raises(ConfigError):
        TrainPlan(p_text=1.5).validate()
    with pytest.raises(ConfigError):
        TrainPlan(shift=0.5).validate()


# -- checkpoints --------------------------------------------------------------------------


def _trained(tmp_path, records, steps1=2, steps2=2):
    cfg = _cfg(tmp_path)
    data = session.prepare(cfg, records)
    model = session.new_model(cfg, data)
    from echomotion.training import Trainer

    tr = Trainer(model, cfg.train, seed=cfg.seed)
    tr.run(Phase.MOTION_ONLY, data.motion_only, steps1)
    tr.run(Phase.MULTI_TASK, data.paired, steps2)
    return cfg, data, tr


def test_round_trip_is_byte_identical(tmp_path, records):
    cfg, _, tr = _trained(tmp_path, records)
    blob = ck.to_bytes(ck.snapshot(cfg, tr.model, tr.phase, tr.step, tr.optimizer.state))
    back = ck.from_bytes(blob)
    assert ck.to_bytes(back) == blob
    assert back.config == cfg and back.phase == 2 and back.step == 2
    model = ck.build_model(back)
    for k, p in tr.model.params.items():
        np.testing.assert_array_equal(model.params[k].data, p.data)
    np.testing.assert_array_equal(model.stats.motion_prior.basis, tr.model.stats.motion_prior.basis)
    assert model.phase == Phase.MULTI_TASK
    st = ck.optimizer_state(back)
    assert st.step == tr.optimizer.state.step and set(st.m) == set(tr.optimizer.state.m)


def test_save_load_file(tmp_path, records):
    cfg, _, tr = _trained(tmp_path, records, 1, 0)
    path = tmp_path / "a.ckpt"
    ck.save(path, ck.snapshot(cfg, tr.model, tr.phase, tr.step, None))
    assert ck.to_bytes(ck.load(path)) == path.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))
    assert ck.optimizer_state(ck.load(path)) is None


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing", "json"])
def test_corrupt_checkpoints(tmp_path, records, mutate):
    cfg, _, tr = _trained(tmp_path, records, 1, 0)
    raw = bytearray(ck.to_bytes(ck.snapshot(cfg, tr.model, tr.phase, tr.step, None)))
    if mutate == "magic":
        raw[:4] = b"NOPE"
    elif mutate == "version":
        raw[4] = 7
    elif mutate == "truncate":
        raw = raw[:-3]
    elif mutate == "trailing":
        raw += b"\0\0\0\0"
    else:
        raw[20] = 0xFF
    with pytest.raises(ck.CheckpointError):
        ck.from_bytes(bytes(raw))


def test_missing_file(tmp_path):
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path / "none.ckpt")


def test_resume_is_exact(tmp_path, records):
    """Stopping at a checkpoint and resuming reproduces an uninterrupted run."""
    full_cfg = _cfg(tmp_path / "full")
    data = session.prepare(full_cfg, records)
    out_full = tmp_path / "full_out"
    from echomotion.training import MetricsLog, Trainer

    tr = Trainer(session.new_model(full_cfg, data), full_cfg.train, seed=full_cfg.seed, log=MetricsLog(out_full))
    session.run_phase(full_cfg, tr, data, Phase.MOTION_ONLY, 2, out_full)
    session.run_phase(full_cfg, tr, data, Phase.MULTI_TASK, 7, out_full)

    out = tmp_path / "part_out"
    part = Trainer(session.new_model(full_cfg, data), full_cfg.train, seed=full_cfg.seed, log=MetricsLog(out))
    session.run_phase(full_cfg, part, data, Phase.MOTION_ONLY, 2, out)
    session.run_phase(full_cfg, part, data, Phase.MULTI_TASK, 5, out)  # checkpoint at step 3 and 5
    # pretend the run died after step 5 but a stale row for step 6 was written
    with open(out / "metrics.csv", "a") as fh:
        fh.write("6,2,joint,0.5,1.0\n")
    resumed = session.resume_trainer(full_cfg, session.checkpoint_path(out, Phase.MULTI_TASK), out)
    assert resumed.step == 5
    session.run_phase(full_cfg, resumed, data, Phase.MULTI_TASK, 7, out)
    for k, p in tr.model.params.items():
        np.testing.assert_array_equal(resumed.model.params[k].data, p.data)
    strip = lambda path: [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]
    assert strip(out / "metrics.csv") == strip(out_full / "metrics.csv")

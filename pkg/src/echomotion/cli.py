"""Command-line entry points: gen-data, train, sample, eval, inspect-attn.

Failures print one ``error[<category>]: <message>`` line to stderr and exit
with the category's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import numerics as nx
from . import session
from . import toydata as td
from .config import ConfigError, Phase, RunConfig, TaskMode, apply_override, load_config
from .evaluation import attn_diagonal_score, cross_modal_block, format_metrics, joint_rms, jerk, mpjpe, pa_mpjpe, token_times
from .motion import TOKENS_PER_FRAME
from .sampling import SampleSpec, SamplingError, generate
from .training import MetricsLog, Trainer, interpolate, make_examples
from .video import video_token_count

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "train": 6, "sample": 7, "io": 8}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _parse_kinds(raw: str | None):
    if not raw:
        return tuple(td.MotionKind)
    kinds = []
    for name in raw.split(","):
        try:
            kinds.append(td.MotionKind[name.strip().upper()])
        except KeyError:
            raise CliError("usage", f"unknown motion kind {name!r}; choose from "
                                    f"{', '.join(k.name.lower() for k in td.MotionKind)}") from None
    return tuple(kinds)


def _read_records(path) -> list:
    try:
        return td.read_dataset(path)
    except OSError as exc:
        raise CliError("io", f"cannot read dataset {path}: {exc.strerror or exc}") from None
    except td.DatasetFormatError as exc:
        raise CliError("data", f"{path}: {exc}") from None


def _load_ckpt(path) -> ck.Checkpoint:
    if not Path(path).exists():
        raise CliError("checkpoint", f"checkpoint {path} does not exist")
    try:
        return ck.load(path)
    except OSError as exc:
        raise CliError("io", f"cannot read checkpoint {path}: {exc}") from None


def _load_model(path):
    c = _load_ckpt(path)
    return c, ck.build_model(c)


def _write(path, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CliError("io", f"cannot write {path}: {exc.strerror or exc}") from None


# -- gen-data -------------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    kinds = _parse_kinds(args.kinds)
    if args.count < 1:
        raise CliError("usage", "--count must be >= 1")
    if args.frames % 4 != 1:
        raise CliError("data", f"--frames must be 1 mod 4 (4:1 temporal compression), got {args.frames}")
    if args.size < 8 or args.size % 4:
        raise CliError("data", f"--size must be a multiple of 4 and >= 8, got {args.size}")
    records = td.gen_corpus(args.count, args.seed, kinds, frames=args.frames, size=args.size)
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        td.write_dataset(records, args.out)
    except OSError as exc:
        raise CliError("io", f"cannot write {args.out}: {exc.strerror or exc}") from None
    counts = {k.name.lower(): sum(r.kind == k for r in records) for k in kinds}
    vtok = video_token_count(args.frames, args.size, args.size, 4)
    print(f"wrote {args.out}: clips={len(records)} frames={args.frames} size={args.size}x{args.size} "
          f"bytes={Path(args.out).stat().st_size}")
    print("kinds: " + " ".join(f"{k}={n}" for k, n in counts.items()))
    print(f"stats: video_tokens/clip={vtok} (stride 4) motion_tokens/clip={TOKENS_PER_FRAME * args.frames} "
          f"({TOKENS_PER_FRAME} per frame x {args.frames} frames)")


# -- train ------------------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply_override(cfg, key.strip(), raw.strip())
    return cfg.validate()


def _progress(trainer) -> None:
    every = trainer.plan.log_every
    if trainer.step % every == 0:
        recent = trainer.log.losses(int(trainer.phase))[-every:]
        print(f"phase={int(trainer.phase)} step={trainer.step} loss={np.mean(recent):.5f}", flush=True)


def cmd_train(args) -> None:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    phases = {"1": [Phase.MOTION_ONLY], "2": [Phase.MULTI_TASK], "all": [Phase.MOTION_ONLY, Phase.MULTI_TASK]}[args.phase]
    if args.skip_phase1 and Phase.MOTION_ONLY in phases:
        if args.phase == "1":
            raise CliError("usage", "--skip-phase1 cannot be combined with --phase 1")
        phases = [Phase.MULTI_TASK]
    tag = "skip_phase1" if args.skip_phase1 else ""
    try:
        data = session.prepare(cfg, _read_records(cfg.dataset))
    except ValueError as exc:
        raise CliError("data", str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(_dump(cfg))
    p1, p2 = session.checkpoint_path(out, Phase.MOTION_ONLY), session.checkpoint_path(out, Phase.MULTI_TASK)

    trainer = None
    if args.resume:
        latest = p2 if p2.exists() else p1 if p1.exists() else None
        if latest is None:
            raise CliError("checkpoint", f"--resume given but no checkpoint in {out}")
        trainer = session.resume_trainer(cfg, latest, out, tag)
        print(f"resumed {latest} at phase={int(trainer.phase)} step={trainer.step}")

    for phase in phases:
        if phase == Phase.MOTION_ONLY:
            if trainer is None:
                for name in ("metrics.csv", "metrics.log"):
                    (out / name).unlink(missing_ok=True)
                trainer = Trainer(session.new_model(cfg, data), cfg.train, seed=cfg.seed, log=MetricsLog(out))
            if trainer.phase > Phase.MOTION_ONLY:
                continue
            session.run_phase(cfg, trainer, data, phase, cfg.train.phase1_steps, out, _progress)
        else:
            if trainer is None and args.skip_phase1:
                for name in ("metrics.csv", "metrics.log"):
                    (out / name).unlink(missing_ok=True)
                trainer = Trainer(session.new_model(cfg, data), cfg.train, seed=cfg.seed, log=MetricsLog(out, tag=tag))
                trainer.model.copy_video_weights_to_motion()
            elif trainer is None:
                if not p1.exists():
                    raise CliError("train", f"phase 2 needs a phase-1 checkpoint at {p1} "
                                            "(run --phase 1 first or pass --skip-phase1)")
                trainer = session.resume_trainer(cfg, p1, out)
                if trainer.step < cfg.train.phase1_steps:
                    raise CliError("train", f"phase-1 checkpoint stopped at step {trainer.step} of "
                                            f"{cfg.train.phase1_steps}; finish it with --phase 1 --resume")
            session.run_phase(cfg, trainer, data, phase, cfg.train.phase2_steps, out, _progress)
    losses = trainer.log.losses(int(trainer.phase))
    tail = f" last_loss={losses[-1]:.5f}" if losses else ""
    print(f"done: phase={int(trainer.phase)} step={trainer.step}{tail} checkpoint="
          f"{session.checkpoint_path(out, trainer.phase)}")


def _dump(cfg: RunConfig) -> str:
    from .config import dump_config

    return dump_config(cfg)


# -- sample ---------------------------------------------------------------------------------


def _prompt(raw: str | None, vocab: int) -> list | None:
    if raw is None:
        return None
    ids = []
    for tok in raw.replace(",", " ").split():
        if tok.isdigit():
            ids.append(int(tok))
        elif tok in td.WORD_TO_ID:
            ids.append(td.WORD_TO_ID[tok])
        else:
            raise CliError("usage", f"unknown prompt token {tok!r}")
    if any(i >= vocab - 1 for i in ids):
        raise CliError("usage", f"prompt token ids must be < {vocab - 1} (the last id is padding)")
    return ids


def write_ppm_stream(video, path) -> None:
    """Concatenated binary PPM (P6) frames, viewable with most image tools."""
    f, h, w, _ = video.frames.shape
    blob = b"".join(b"P6\n%d %d\n255\n" % (w, h) + video.frames[i].tobytes() for i in range(f))
    _write(path, blob)


def cmd_sample(args) -> None:
    c, model = _load_model(args.ckpt)
    cfg = _config(args) if (args.config or args.set) else c.config
    mode = TaskMode.parse(args.mode)
    text = _prompt(args.prompt_tokens, model.cfg.text_vocab)
    cond = None
    if args.cond is not None:
        recs = _read_records(args.cond)
        if not 0 <= args.cond_index < len(recs):
            raise CliError("usage", f"--cond-index {args.cond_index} out of range ({len(recs)} records)")
        cond = recs[args.cond_index]
    if mode != TaskMode.JOINT and cond is None:
        raise CliError("sample", f"{mode.short} needs --cond (a dataset file holding the condition clip)")
    if mode == TaskMode.JOINT and cond is not None:
        raise CliError("sample", "joint mode takes no --cond")
    settings = cfg.sample
    spec = SampleSpec.from_settings(settings, mode=mode, text=text, seed=args.seed,
                                    motion_cond=cond.motion if mode == TaskMode.MOTION_TO_VIDEO else None,
                                    video_cond=cond.video if mode == TaskMode.VIDEO_TO_MOTION else None)
    if args.steps is not None:
        spec.steps = args.steps
    res = generate(spec, model, allow_untrained=args.allow_untrained)
    video = res.video if res.video is not None else cond.video
    motion = res.motion if res.motion is not None else cond.motion
    kind = cond.kind if cond is not None else td.MotionKind(0)
    rec = td.DatasetRecord(motion, video, list(text or []), kind, args.seed)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        td.write_dataset([rec], out.with_suffix(".hmvd"))
    except OSError as exc:
        raise CliError("io", f"cannot write {out}: {exc.strerror or exc}") from None
    if res.video is not None:
        write_ppm_stream(res.video, out.with_suffix(".ppm"))
    uniq = sorted(set(res.calls_per_step))
    print(f"mode={mode.short} steps={len(res.calls_per_step)} calls_per_step="
          f"{uniq[0] if len(uniq) == 1 else res.calls_per_step} total_calls={sum(res.calls_per_step)}")
    print(f"wrote {out.with_suffix('.hmvd')}" + (f" and {out.with_suffix('.ppm')}" if res.video is not None else ""))


# -- eval -------------------------------------------------------------------------------------


def cmd_eval(args) -> None:
    records = _read_records(args.dataset)
    if args.limit:
        records = records[: args.limit]
    if args.pred:
        preds = [r.motion for r in _read_records(args.pred)]
        if len(preds) < len(records):
            raise CliError("data", f"{args.pred} has {len(preds)} clips, need {len(records)}")
    else:
        if not args.ckpt:
            raise CliError("checkpoint", "eval needs --ckpt (or --pred with precomputed motions)")
        c, model = _load_model(args.ckpt)
        preds = []
        for r in records:
            spec = SampleSpec.from_settings(c.config.sample, mode=TaskMode.VIDEO_TO_MOTION, video_cond=r.video,
                                            seed=args.seed)
            if args.steps is not None:
                spec.steps = args.steps
            try:
                preds.append(generate(spec, model).motion)
            except SamplingError as exc:
                raise CliError("checkpoint", str(exc)) from None
    rows = []
    for i, (r, p) in enumerate(zip(records, preds)):
        if p.num_frames != r.motion.num_frames:
            raise CliError("data", f"clip {i}: prediction has {p.num_frames} frames, reference {r.motion.num_frames}")
        rows.append({"clip": i, "kind": r.kind.name.lower(), "mpjpe": mpjpe(p, r.motion),
                     "pa_mpjpe": pa_mpjpe(p, r.motion), "rms": joint_rms(p, r.motion),
                     "pa_rms": joint_rms(p, r.motion, procrustes=True), "jerk": jerk(p), "jerk_gt": jerk(r.motion)})
    try:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        with open(args.report, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise CliError("io", f"cannot write {args.report}: {exc.strerror or exc}") from None
    summary = {"clips": len(rows)}
    for key in ("mpjpe", "pa_mpjpe", "rms", "pa_rms", "jerk", "jerk_gt"):
        summary[key] = float(np.mean([row[key] for row in rows]))
    sys.stdout.write(format_metrics(summary))


# -- inspect-attn -------------------------------------------------------------------------------


def cmd_inspect_attn(args) -> None:
    c, model = _load_model(args.ckpt)
    recs = _read_records(args.clip)
    if not 0 <= args.index < len(recs):
        raise CliError("usage", f"--index {args.index} out of range ({len(recs)} records)")
    if not 0.0 <= args.t < 1.0:
        raise CliError("usage", "--t must lie in [0, 1)")
    cfg = model.cfg
    ex = make_examples([recs[args.index]], model.motion_stats, cfg.stride, cfg.text_len)[0]
    rng = np.random.default_rng([args.seed, args.index, 31])
    x0, m0 = rng.standard_normal(ex.video.shape), rng.standard_normal(ex.motion.shape)
    maps = []
    with nx.no_grad():
        model.forward(interpolate(x0, ex.video, args.t), interpolate(m0, ex.motion, args.t), ex.text, args.t,
                      TaskMode.JOINT, attn_store=maps)
    layers = [m["layer"] for m in maps]
    if args.layer is not None:
        if args.layer not in layers:
            raise CliError("usage", f"--layer {args.layer} is not a dual-modality block; choose from {layers}")
        maps = [m for m in maps if m["layer"] == args.layer]
    video_t, motion_t = token_times(*cfg.latent_grid, cfg.frames, TOKENS_PER_FRAME)
    block = np.mean([cross_modal_block(m["probs"], m["n_video"]).mean(axis=0) for m in maps], axis=0)
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(args.out, block, delimiter=",", fmt="%.6g")
    except OSError as exc:
        raise CliError("io", f"cannot write {args.out}: {exc.strerror or exc}") from None
    rep = attn_diagonal_score(maps, video_t, motion_t)
    print(f"wrote {args.out}: {block.shape[0]} video tokens x {block.shape[1]} motion tokens")
    sys.stdout.write(format_metrics(rep.as_dict()))


# -- entry point ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="echomotion", description="Joint video+motion diffusion on toy data.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic video+motion dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--kinds", help="comma list, e.g. walk,wave (default: all)")
    g.add_argument("--frames", type=int, default=17)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    def config_args(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    t = sub.add_parser("train", help="run training phase(s)")
    config_args(t)
    t.add_argument("--phase", choices=("1", "2", "all"), default="all")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in out_dir")
    t.add_argument("--skip-phase1", action="store_true", help="ablation: one-stage training")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate from a checkpoint")
    config_args(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", choices=("joint", "m2v", "v2m"), default="joint")
    s.add_argument("--prompt-tokens", help="caption as token ids or words (comma/space separated)")
    s.add_argument("--cond", help="dataset file holding the condition clip")
    s.add_argument("--cond-index", type=int, default=0)
    s.add_argument("--out", required=True, help="output path stem (.hmvd and .ppm are written)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int)
    s.add_argument("--allow-untrained", action="store_true")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="video-to-motion metrics over a dataset")
    e.add_argument("--ckpt")
    e.add_argument("--dataset", required=True)
    e.add_argument("--report", required=True, help="per-clip CSV")
    e.add_argument("--pred", help="dataset of predicted motions instead of sampling")
    e.add_argument("--limit", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("inspect-attn", help="dump video-to-motion attention")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--clip", required=True, help="dataset file")
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--layer", type=int, help="block index (default: mean over dual blocks)")
    a.add_argument("--t", type=float, default=0.75)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True, help="CSV, video tokens x motion tokens")
    a.set_defaults(fn=cmd_inspect_attn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except ConfigError as exc:
        category, msg = "config", str(exc)
    except ck.CheckpointError as exc:
        category, msg = "checkpoint", str(exc)
    except SamplingError as exc:
        category, msg = "sample", str(exc)
    else:
        return 0
    print(f"error[{category}]: {msg}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())

"""Run orchestration shared by the CLI and the experiment scripts: data
preparation, checkpointed phase runs and exact resumption."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import toydata as td
from .config import Phase, RunConfig
from .model import DataStats, DualDiT, join_motion_groups
from .motion import MotionStats, clip_to_latent
from .training import Example, MetricsLog, Trainer, fit_stats, make_examples

PHASE1_DATA_SEED = 424242


@dataclass
class PreparedData:
    records: list
    paired: list[Example]
    motion_only: list[Example]
    stats: DataStats


def motion_only_examples(count: int, seed: int, frames: int, stats: MotionStats, text_len: int) -> list[Example]:
    """Motion/caption pairs from the generator's motion-only mode (no rendering),
    standing in for an external text-motion corpus."""
    kinds = list(td.MotionKind)
    out = []
    for i in range(count):
        s = td.record_seed(seed, i)
        kind = kinds[i % len(kinds)]
        clip = td.gen_motion_clip(kind, s, frames)
        out.append(Example(motion=join_motion_groups(clip_to_latent(clip, stats)),
                           text=td.pad_caption(td.gen_caption(kind, s), text_len), video=None, index=i))
    return out


def prepare(cfg: RunConfig, records: list | None = None, motion_only_count: int | None = None) -> PreparedData:
    if records is None:
        records = td.read_dataset(cfg.dataset)
    if not records:
        raise ValueError("dataset is empty")
    m = cfg.model
    for r in records:
        if r.video.frames.shape[:3] != (m.frames, m.height, m.width):
            raise ValueError(f"dataset geometry {r.video.frames.shape[:3]} does not match config "
                             f"({m.frames}, {m.height}, {m.width})")
    stats = fit_stats(records, m.stride)
    paired = make_examples(records, stats.motion, m.stride, m.text_len)
    n1 = len(records) if motion_only_count is None else motion_only_count
    motion_only = motion_only_examples(n1, PHASE1_DATA_SEED + cfg.seed, m.frames, stats.motion, m.text_len)
    return PreparedData(records, paired, motion_only, stats)


def new_model(cfg: RunConfig, data: PreparedData) -> DualDiT:
    return DualDiT(cfg.model, seed=cfg.seed, stats=data.stats)


def _truncate_metrics(out_dir: Path, phase: int, step: int) -> None:
    """Drop metric rows written after the checkpoint we resume from."""
    keep = lambda p, s: p < phase or (p == phase and s <= step)
    csv_path = out_dir / "metrics.csv"
    if csv_path.exists():
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], [r for r in rows[1:] if keep(int(r[1]), int(r[0]))]
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerows([head] + body)
    log_path = out_dir / "metrics.log"
    if log_path.exists():
        lines = []
        for line in log_path.read_text().splitlines():
            kv = dict(tok.split("=", 1) for tok in line.split())
            if keep(int(kv["phase"]), int(kv["step"])):
                lines.append(line)
        log_path.write_text("".join(line + "\n" for line in lines))


def checkpoint_path(out_dir: Path, phase: Phase) -> Path:
    return Path(out_dir) / f"phase{int(phase)}.ckpt"


def save_trainer(cfg: RunConfig, trainer: Trainer, path: Path) -> None:
    ckpt.save(path, ckpt.snapshot(cfg, trainer.model, trainer.phase, trainer.step, trainer.optimizer.state))


def resume_trainer(cfg: RunConfig, path: Path, out_dir: Path | None, tag: str = "") -> Trainer:
    ck = ckpt.load(path)
    model = ckpt.build_model(ck)
    trainer = Trainer(model, cfg.train, seed=cfg.seed, log=MetricsLog(out_dir, tag=tag))
    trainer.restore(Phase(ck.phase), ck.step, ckpt.optimizer_state(ck))
    if out_dir is not None:
        _truncate_metrics(out_dir, ck.phase, ck.step)
    return trainer


def run_phase(cfg: RunConfig, trainer: Trainer, data: PreparedData, phase: Phase, steps: int,
              out_dir: Path | None, progress=None) -> Trainer:
    """Continue ``trainer`` in ``phase`` until its step counter reaches ``steps``,
    checkpointing every ``checkpoint_every`` steps and at the end."""
    if trainer.phase != phase:
        trainer.begin_phase(phase)
    examples = data.motion_only if phase == Phase.MOTION_ONLY else data.paired
    every = cfg.train.checkpoint_every
    while trainer.step < steps:
        trainer.run(phase, examples, 1)
        if progress is not None:
            progress(trainer)
        if out_dir is not None and (trainer.step % every == 0 or trainer.step == steps):
            save_trainer(cfg, trainer, checkpoint_path(out_dir, phase))
    return trainer


def final_losses(out_dir: Path, phase: int) -> np.ndarray:
    with open(Path(out_dir) / "metrics.csv", newline="") as fh:
        return np.array([float(r["loss"]) for r in csv.DictReader(fh) if int(r["phase"]) == phase])

"""Flow-matching objective and the two-phase (motion-only, then multi-task) training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import Phase, TaskMode, TrainPlan
from .model import DataStats, DualDiT, branch_of, join_motion_groups
from .motion import MotionStats, clip_to_latent
from .numerics import Tensor
from .toydata import DatasetRecord, pad_caption
from .video import PatchStats, patchify

TRAIN_TIMESTEPS = 1000


# -- objective -----------------------------------------------------------------------


def interpolate(x0, x1, t: float):
    """``t * x1 + (1 - t) * x0``; works on arrays and tensors."""
    if np.shape(x0) != np.shape(x1):
        raise ValueError(f"shape mismatch {np.shape(x0)} vs {np.shape(x1)}")
    if isinstance(x0, Tensor) or isinstance(x1, Tensor):
        return x1 * t + x0 * (1.0 - t)
    return t * np.asarray(x1) + (1.0 - t) * np.asarray(x0)


def fm_loss(pred, x0, x1, mask=None):
    """Mean squared error of ``pred`` against the velocity ``x1 - x0`` over ``mask``."""
    target = np.asarray(x1) - np.asarray(x0)
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    m = np.ones(target.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), target.shape)
    n = int(m.sum())
    if n == 0:
        raise ValueError("fm_loss mask selects no elements")
    diff = pred - Tensor(target.astype(pred.data.dtype))
    sq = diff * diff
    if mask is not None:
        sq = sq * Tensor(m.astype(pred.data.dtype))
    return sq.sum() * (1.0 / n)


def joint_fm_loss(terms, lambda_motion: float = 1.0) -> Tensor:
    """``terms`` is a list of (modality, pred, target). Squared errors are
    summed (motion weighted by ``lambda_motion``) and divided by the total
    element count."""
    total, count = None, 0
    for modality, pred, target in terms:
        d = pred - Tensor(np.asarray(target, dtype=pred.data.dtype))
        s = (d * d).sum()
        if modality == "motion" and lambda_motion != 1.0:
            s = s * lambda_motion
        total = s if total is None else total + s
        count += int(np.prod(target.shape))
    if total is None or count == 0:
        raise ValueError("no generated modality to score")
    return total * (1.0 / count)


def shift_time(u, shift: float):
    u = np.asarray(u, dtype=np.float64)
    return shift * u / (1.0 + (shift - 1.0) * u)


def sample_train_timestep(rng: np.random.Generator, shift: float) -> float:
    if shift < 1.0:
        raise ValueError("shift must be >= 1")
    u = rng.integers(TRAIN_TIMESTEPS) / (TRAIN_TIMESTEPS - 1)
    return float(shift_time(u, shift))


def sample_paradigm(rng: np.random.Generator, probs) -> TaskMode:
    probs = np.asarray(probs, dtype=np.float64)
    return TaskMode(int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right").clip(0, 2)))


@dataclass(frozen=True)
class Drops:
    text: bool = False
    video: bool = False
    motion: bool = False


def drop_conditions(rng: np.random.Generator, mode: TaskMode, plan: TrainPlan) -> Drops:
    """Paradigm-specific condition dropout.

    Joint drops text; motion-to-video drops text and motion independently;
    video-to-motion always drops text and drops video at random.
    """
    if mode == TaskMode.JOINT:
        return Drops(text=bool(rng.random() < plan.p_text))
    if mode == TaskMode.MOTION_TO_VIDEO:
        return Drops(text=bool(rng.random() < plan.p_text), motion=bool(rng.random() < plan.p_motion))
    return Drops(text=True, video=bool(rng.random() < plan.p_video))


# -- data --------------------------------------------------------------------------


@dataclass
class Example:
    """A training example in latent space. ``video`` is ``None`` for motion-only data."""

    motion: np.ndarray  # (F, 235) normalized
    text: np.ndarray  # (text_len,) padded ids
    video: np.ndarray | None = None  # (N_v, patch_dim) in [-1, 1]
    index: int = 0


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def _gaussian(samples: np.ndarray) -> PatchStats:
    g = PatchStats.from_patches(samples)
    return PatchStats(_f32(g.mean), _f32(g.basis), _f32(g.var))


def fit_stats(records: list[DatasetRecord], stride: int) -> DataStats:
    """Dataset statistics, rounded to float32 so checkpoints store them exactly."""
    ms = MotionStats.from_clips([r.motion for r in records])
    ms = MotionStats(tuple(_f32(m) for m in ms.mean), tuple(_f32(s) for s in ms.std))
    patches = np.concatenate([patchify(r.video, stride) for r in records], axis=0)
    latents = np.concatenate([join_motion_groups(clip_to_latent(r.motion, ms)) for r in records], axis=0)
    return DataStats(_gaussian(patches), ms, _gaussian(latents))


def make_examples(records, stats: MotionStats, stride: int, text_len: int, with_video: bool = True) -> list[Example]:
    out = []
    for i, r in enumerate(records):
        motion = join_motion_groups(clip_to_latent(r.motion, stats))
        video = patchify(r.video, stride) if with_video else None
        out.append(Example(motion=motion, text=pad_caption(r.caption, text_len), video=video, index=i))
    return out


# -- trainer -----------------------------------------------------------------------


class TrainingError(RuntimeError):
    pass


@dataclass
class StepRecord:
    step: int
    phase: int
    paradigm: str
    loss: float
    wall_ms: float


@dataclass
class MetricsLog:
    """In-memory step records, optionally mirrored to ``metrics.log`` / ``metrics.csv``."""

    out_dir: Path | None = None
    records: list = field(default_factory=list)
    tag: str = ""  # appended to metrics.log lines, e.g. "skip_phase1"

    FIELDS = ("step", "phase", "paradigm", "loss", "wall_ms")

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.out_dir / "metrics.csv"
        new = not csv_path.exists()
        with open(csv_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(self.FIELDS)
            w.writerow([rec.step, rec.phase, rec.paradigm, repr(rec.loss), f"{rec.wall_ms:.3f}"])
        with open(self.out_dir / "metrics.log", "a") as fh:
            fh.write(f"step={rec.step} phase={rec.phase} paradigm={rec.paradigm} loss={rec.loss!r} wall_ms={rec.wall_ms:.3f}"
                     + (f" tag={self.tag}" if self.tag else "") + "\n")

    def losses(self, phase: int | None = None) -> list[float]:
        return [r.loss for r in self.records if phase is None or r.phase == phase]


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class Trainer:
    """Owns a model, its optimizer and the seeded step counter.

    All randomness is derived from ``(seed, phase, step)`` for batch selection
    and ``(seed, phase, step, example index)`` for everything per example, so a
    resumed run replays the same draws.
    """

    def __init__(self, model: DualDiT, plan: TrainPlan, seed: int = 0, log: MetricsLog | None = None):
        plan.validate()
        self.model = model
        self.plan = plan
        self.seed = int(seed)
        self.log = log or MetricsLog()
        self.phase = Phase.UNTRAINED
        self.step = 0
        self.optimizer: nx.AdamW | None = None

    # phase management
    def begin_phase(self, phase: Phase) -> None:
        if phase == self.phase:
            return
        if phase == Phase.MOTION_ONLY:
            for name, p in self.model.params.items():
                p.requires_grad = branch_of(name) == "motion"
        elif phase == Phase.MULTI_TASK:
            for p in self.model.params.values():
                p.requires_grad = True
        else:
            raise ValueError(f"cannot begin phase {phase}")
        trainable = {k: v for k, v in self.model.params.items() if v.requires_grad}
        self.optimizer = nx.AdamW(trainable, lr=self.plan.lr, betas=(self.plan.beta1, self.plan.beta2),
                                  eps=self.plan.eps, weight_decay=self.plan.weight_decay)
        self.phase = Phase(phase)
        self.model.phase = self.phase
        self.step = 0

    def _example_rng(self, idx: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, int(self.phase), self.step, int(idx)])

    def select_batch(self, n: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, int(self.phase), self.step])
        return rng.choice(n, size=min(self.plan.batch_size, n), replace=False)

    # per-example losses
    def motion_only_loss(self, ex: Example) -> Tensor:
        rng = self._example_rng(ex.index)
        t = sample_train_timestep(rng, self.plan.shift)
        drop_text = bool(rng.random() < self.plan.p_text)
        m1 = ex.motion
        m0 = rng.standard_normal(m1.shape)
        out = self.model(None, interpolate(m0, m1, t), None if drop_text else ex.text, t, TaskMode.JOINT)
        return joint_fm_loss([("motion", out.motion, m1 - m0)], self.plan.lambda_motion)

    def paired_loss(self, ex: Example, mode: TaskMode | None = None):
        """Loss for one paired example; returns (loss, mode, model inputs) for inspection."""
        rng = self._example_rng(ex.index)
        if mode is None:
            mode = sample_paradigm(rng, self.plan.paradigm_probs)
        else:
            sample_paradigm(rng, self.plan.paradigm_probs)  # keep the stream aligned
        drops = drop_conditions(rng, mode, self.plan)
        t = sample_train_timestep(rng, self.plan.shift)
        x1, m1 = ex.video, ex.motion
        x0 = rng.standard_normal(x1.shape)
        m0 = rng.standard_normal(m1.shape)
        text = None if drops.text else ex.text
        if mode == TaskMode.JOINT:
            video_in, motion_in = interpolate(x0, x1, t), interpolate(m0, m1, t)
        elif mode == TaskMode.MOTION_TO_VIDEO:
            video_in, motion_in = interpolate(x0, x1, t), (None if drops.motion else m1)
        else:
            video_in, motion_in = (None if drops.video else x1), interpolate(m0, m1, t)
        out = self.model(video_in, motion_in, text, t, mode)
        terms = []
        if mode in (TaskMode.JOINT, TaskMode.MOTION_TO_VIDEO):
            terms.append(("video", out.video, x1 - x0))
        if mode in (TaskMode.JOINT, TaskMode.VIDEO_TO_MOTION):
            terms.append(("motion", out.motion, m1 - m0))
        inputs = {"video": video_in, "motion": motion_in, "text": text, "t": t, "drops": drops}
        return joint_fm_loss(terms, self.plan.lambda_motion), mode, inputs

    # steps
    def _step(self, loss_fns) -> float:
        """Backpropagate each example's loss separately (one graph alive at a
        time), average the gradients and take one optimizer step."""
        params = self.optimizer.params
        acc, value = None, 0.0
        for fn in loss_fns:
            loss = fn()
            g = nx.backward(loss, params)
            if acc is None:
                acc = {k: g[k].data for k in params}
            else:
                for k in acc:
                    acc[k] += g[k].data
            value += float(loss.data)
        n = len(loss_fns)
        grads = acc if n == 1 else {k: v / np.float32(n) for k, v in acc.items()}
        if self.plan.grad_clip > 0:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
            if norm > self.plan.grad_clip:
                grads = {k: (g * (self.plan.grad_clip / norm)).astype(g.dtype) for k, g in grads.items()}
        self.optimizer.step(grads)
        return value / n

    def phase1_step(self, batch: list[Example]) -> float:
        if self.phase != Phase.MOTION_ONLY:
            raise TrainingError("phase1_step requires the motion-only phase")
        if any(ex.video is not None for ex in batch):
            raise TrainingError("phase 1 is motion-only: video inputs must not be supplied")
        start = time.perf_counter()
        value = self._step([lambda ex=ex: self.motion_only_loss(ex) for ex in batch])
        self.step += 1
        self.log.append(StepRecord(self.step, 1, "motion", value, (time.perf_counter() - start) * 1e3))
        return value

    def phase2_step(self, batch: list[Example], force_mode: TaskMode | None = None) -> float:
        if self.phase != Phase.MULTI_TASK:
            raise TrainingError("phase2_step requires the multi-task phase")
        if any(ex.video is None or ex.motion is None for ex in batch):
            raise TrainingError("phase 2 needs paired motion and video examples")
        start = time.perf_counter()
        modes = []

        def make(ex):
            def fn():
                loss, mode, _ = self.paired_loss(ex, force_mode)
                modes.append(mode.short)
                return loss
            return fn

        value = self._step([make(ex) for ex in batch])
        self.step += 1
        self.log.append(StepRecord(self.step, 2, "+".join(modes), value, (time.perf_counter() - start) * 1e3))
        return value

    def restore(self, phase: Phase, step: int, opt_state: nx.OptimizerState | None = None) -> None:
        """Re-enter ``phase`` at ``step`` (used when resuming from a checkpoint)."""
        self.phase = Phase.UNTRAINED
        self.begin_phase(phase)
        self.step = int(step)
        if opt_state is not None:
            self.optimizer.state = opt_state

    def run(self, phase: Phase, examples: list[Example], steps: int, on_step=None) -> list[float]:
        """Run ``steps`` more steps of ``phase`` (continuing the current counter)."""
        if self.phase != phase:
            self.begin_phase(phase)
        fn = self.phase1_step if phase == Phase.MOTION_ONLY else self.phase2_step
        losses = []
        for _ in range(steps):
            idx = self.select_batch(len(examples))
            losses.append(fn([examples[i] for i in idx]))
            if on_step is not None:
                on_step(self)
        return losses

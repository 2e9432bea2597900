"""Euler sampling over the learned flow with in-context classifier-free guidance.

Integration runs from noise at ``t = 0`` to data at ``t = 1``. Each mode calls
the model on a fixed set of condition subsets per step:

* joint: ``u(x, m, y)`` and ``u(x, m, null)``, guided by ``w1`` on both outputs;
* motion-to-video: ``u(x, -, null)``, ``u(x, m, y)``, ``u(x, m, null)``;
* video-to-motion: ``u(-, m, null)`` and ``u(x, m, null)`` (text never used).

The condition modality is fed clean at the global ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import Phase, SampleSettings, TaskMode
from .model import MOTION_WIDTH, DualDiT, join_motion_groups
from .motion import MotionClip, clip_to_latent, latent_to_clip
from .toydata import pad_caption
from .training import shift_time
from .video import TEMPORAL_RATIO, VideoClip, latent_shape, patchify, to_bytes


def make_schedule(steps: int, shift: float) -> np.ndarray:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if shift < 1.0:
        raise ValueError("shift must be >= 1")
    return shift_time(np.arange(steps + 1) / steps, shift)


def euler_step(x, v_pred, t_i: float, t_next: float):
    if not t_next > t_i:
        raise ValueError(f"schedule must increase, got {t_i} -> {t_next}")
    return x + (t_next - t_i) * v_pred


def _same(*arrays) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"guidance inputs differ in shape: {sorted(shapes)}")


def guide_joint(u_cond, u_null, omega1: float):
    _same(u_cond, u_null)
    return u_null + omega1 * (u_cond - u_null)


def guide_m2v(u_nn, u_my, u_mn, omega1: float, omega2: float):
    _same(u_nn, u_my, u_mn)
    return u_nn + omega1 * (u_my - u_mn) + omega2 * (u_mn - u_nn)


def guide_v2m(u_nm, u_xm, omega2: float):
    _same(u_nm, u_xm)
    return u_nm + omega2 * (u_xm - u_nm)


CALLS_PER_STEP = {TaskMode.JOINT: 2, TaskMode.MOTION_TO_VIDEO: 3, TaskMode.VIDEO_TO_MOTION: 2}

# predict(video, motion, text, t, task) -> (video velocity | None, motion velocity | None)
Predictor = Callable[..., tuple]


def guided_velocity(predict: Predictor, mode: TaskMode, x, m, text, t: float, omega1: float, omega2: float):
    """Guided velocities ``(video, motion)`` for one step; the condition
    modality's entry is ``None``."""
    if mode == TaskMode.JOINT:
        cv, cm = predict(x, m, text, t, mode)
        nv, nm = predict(x, m, None, t, mode)
        return guide_joint(cv, nv, omega1), guide_joint(cm, nm, omega1)
    if mode == TaskMode.MOTION_TO_VIDEO:
        u_nn, _ = predict(x, None, None, t, mode)
        u_my, _ = predict(x, m, text, t, mode)
        u_mn, _ = predict(x, m, None, t, mode)
        return guide_m2v(u_nn, u_my, u_mn, omega1, omega2), None
    _, u_nm = predict(None, m, None, t, mode)
    _, u_xm = predict(x, m, None, t, mode)
    return None, guide_v2m(u_nm, u_xm, omega2)


def run_sampler(predict: Predictor, mode: TaskMode, x_init, m_init, text, schedule: np.ndarray,
                omega1: float, omega2: float, on_step=None):
    """Integrate the generated modality (or both) along ``schedule``.

    Conditions are passed through untouched; returns the final ``(x, m)``.
    """
    x, m = x_init, m_init
    for i in range(len(schedule) - 1):
        t0, t1 = float(schedule[i]), float(schedule[i + 1])
        vx, vm = guided_velocity(predict, mode, x, m, text, t0, omega1, omega2)
        if vx is not None:
            x = euler_step(x, vx, t0, t1)
        if vm is not None:
            m = euler_step(m, vm, t0, t1)
        if on_step is not None:
            on_step(i, x, m)
    return x, m


class CountingPredictor:
    """Wraps a predictor and counts model evaluations."""

    def __init__(self, predict: Predictor):
        self.predict = predict
        self.calls = 0

    def __call__(self, *args):
        self.calls += 1
        return self.predict(*args)


def model_predictor(model: DualDiT, attn_store: list | None = None) -> Predictor:
    def predict(video, motion, text, t, task):
        with nx.no_grad():
            out = model.forward(video, motion, text, t, task, attn_store)
        to_np = lambda o: None if o is None else o.data.astype(np.float64)
        return to_np(out.video), to_np(out.motion)

    return predict


# -- generation ------------------------------------------------------------------------


class SamplingError(ValueError):
    pass


@dataclass
class SampleSpec:
    mode: TaskMode = TaskMode.JOINT
    steps: int = 50
    shift: float = 8.0
    omega1: float = 6.0
    omega2: float = 1.5
    seed: int = 0
    motion_cond: MotionClip | None = None
    video_cond: VideoClip | None = None
    text: list | None = None

    @classmethod
    def from_settings(cls, s: SampleSettings, **kw) -> "SampleSpec":
        return cls(steps=s.sample_steps, shift=s.sample_shift, omega1=s.omega1, omega2=s.omega2, **kw)

    def validate(self) -> None:
        if self.steps < 1 or self.shift < 1.0:
            raise SamplingError("steps >= 1 and shift >= 1 are required")
        if self.omega1 < 0 or self.omega2 < 0:
            raise SamplingError("guidance scales must be non-negative")
        needs_m = self.mode == TaskMode.MOTION_TO_VIDEO
        needs_v = self.mode == TaskMode.VIDEO_TO_MOTION
        if needs_m != (self.motion_cond is not None):
            raise SamplingError("motion-to-video needs a motion condition (and only that mode takes one)")
        if needs_v != (self.video_cond is not None):
            raise SamplingError("video-to-motion needs a video condition (and only that mode takes one)")


@dataclass
class SampleResult:
    video: VideoClip | None
    motion: MotionClip | None
    video_latent: np.ndarray
    motion_latent: np.ndarray
    calls_per_step: list


def decode_video_latent(latent: np.ndarray, frames: int, height: int, width: int, stride: int, fps: int) -> VideoClip:
    """Patches -> frames; frame 0 is the mean of its four replicas."""
    t_lat, h_lat, w_lat = latent_shape(frames, height, width, stride)
    g = np.asarray(latent).reshape(t_lat, h_lat, w_lat, TEMPORAL_RATIO, stride, stride, 3)
    g = g.transpose(0, 3, 1, 4, 2, 5, 6).reshape(t_lat, TEMPORAL_RATIO, height, width, 3)
    out = np.concatenate([g[0].mean(axis=0)[None], g[1:].reshape(-1, height, width, 3)], axis=0)
    return VideoClip(to_bytes(out), fps=fps)


def generate(spec: SampleSpec, model: DualDiT, allow_untrained: bool = False,
             attn_store: list | None = None) -> SampleResult:
    """Sample one clip. Conditional modes need a model trained through the
    multi-task phase unless ``allow_untrained`` (used for baselines)."""
    spec.validate()
    cfg = model.cfg
    if spec.mode != TaskMode.JOINT and model.phase < Phase.MULTI_TASK and not allow_untrained:
        raise SamplingError(f"{spec.mode.short} sampling needs a model trained through phase 2")
    rng = np.random.default_rng([spec.seed, int(spec.mode), 11])
    n_v = int(np.prod(cfg.latent_grid))
    x = rng.standard_normal((n_v, cfg.patch_dim))
    m = rng.standard_normal((cfg.frames, MOTION_WIDTH))
    if spec.mode == TaskMode.MOTION_TO_VIDEO:
        if spec.motion_cond.num_frames != cfg.frames:
            raise SamplingError(f"motion condition has {spec.motion_cond.num_frames} frames, model expects {cfg.frames}")
        m = join_motion_groups(clip_to_latent(spec.motion_cond, model.motion_stats))
    if spec.mode == TaskMode.VIDEO_TO_MOTION:
        if spec.video_cond.frames.shape[:3] != (cfg.frames, cfg.height, cfg.width):
            raise SamplingError(f"video condition has shape {spec.video_cond.frames.shape}")
        x = patchify(spec.video_cond, cfg.stride)
    text = None if spec.text is None else pad_caption(spec.text, cfg.text_len, pad_id=cfg.text_vocab - 1)
    counter = CountingPredictor(model_predictor(model, attn_store))
    calls = []

    def on_step(i, _x, _m):
        calls.append(counter.calls - sum(calls))

    x, m = run_sampler(counter, spec.mode, x, m, text, make_schedule(spec.steps, spec.shift),
                       spec.omega1, spec.omega2, on_step)
    video = motion = None
    if spec.mode in (TaskMode.JOINT, TaskMode.MOTION_TO_VIDEO):
        video = decode_video_latent(x, cfg.frames, cfg.height, cfg.width, cfg.stride, cfg.fps)
    if spec.mode in (TaskMode.JOINT, TaskMode.VIDEO_TO_MOTION):
        groups = (m[:, :75].reshape(-1, 25, 3), m[:, 75:225].reshape(-1, 25, 6), m[:, 225:].reshape(-1, 1, 10))
        motion = latent_to_clip(groups, model.motion_stats, fps=cfg.fps)
    return SampleResult(video, motion, x, m, calls)


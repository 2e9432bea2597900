"""Parametric human motion: SMPL-style parameters, token layout and projectors.

Per frame the parameters are grouped into three token groups:

* 25 position tokens ``[v, eta_0 .. eta_23]`` (3 values each),
* 25 rotation tokens ``[gamma, theta_0 .. theta_23]`` (6D rotations),
* 1 shape token ``beta`` (10 values),

giving 51 tokens per frame, laid out frame-major. ``eta_0`` is the root joint
and is kept equal to ``v``; likewise ``theta_0`` mirrors ``gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

NUM_JOINTS = 24
POS_TOKENS = NUM_JOINTS + 1
ROT_TOKENS = NUM_JOINTS + 1
SHAPE_TOKENS = 1
TOKENS_PER_FRAME = POS_TOKENS + ROT_TOKENS + SHAPE_TOKENS
GROUP_DIMS = (3, 6, 10)
GROUP_TOKENS = (POS_TOKENS, ROT_TOKENS, SHAPE_TOKENS)
VALUES_PER_FRAME = sum(n * d for n, d in zip(GROUP_TOKENS, GROUP_DIMS))

assert TOKENS_PER_FRAME == 51


@dataclass
class MotionFrame:
    beta: np.ndarray  # (10,)
    theta: np.ndarray  # (24, 6)
    gamma: np.ndarray  # (6,)
    v: np.ndarray  # (3,)
    eta: np.ndarray  # (24, 3)

    @classmethod
    def zeros(cls) -> "MotionFrame":
        return cls(np.zeros(10), np.zeros((24, 6)), np.zeros(6), np.zeros(3), np.zeros((24, 3)))


@dataclass
class MotionClip:
    """F frames of motion parameters stored as stacked arrays."""

    beta: np.ndarray  # (F, 10)
    theta: np.ndarray  # (F, 24, 6)
    gamma: np.ndarray  # (F, 6)
    v: np.ndarray  # (F, 3)
    eta: np.ndarray  # (F, 24, 3)
    fps: int = 16

    def __post_init__(self):
        f = len(self.beta)
        shapes = {"beta": (f, 10), "theta": (f, 24, 6), "gamma": (f, 6), "v": (f, 3), "eta": (f, 24, 3)}
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if f < 1:
            raise ValueError("a motion clip needs at least one frame")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def num_frames(self) -> int:
        return len(self.beta)

    def __len__(self) -> int:
        return self.num_frames

    @property
    def frames(self) -> list[MotionFrame]:
        return [self.frame(i) for i in range(self.num_frames)]

    def frame(self, i: int) -> MotionFrame:
        return MotionFrame(self.beta[i], self.theta[i], self.gamma[i], self.v[i], self.eta[i])

    @classmethod
    def from_frames(cls, frames: list[MotionFrame], fps: int = 16) -> "MotionClip":
        return cls(
            beta=np.stack([f.beta for f in frames]),
            theta=np.stack([f.theta for f in frames]),
            gamma=np.stack([f.gamma for f in frames]),
            v=np.stack([f.v for f in frames]),
            eta=np.stack([f.eta for f in frames]),
            fps=fps,
        )

    def validate(self, atol: float = 1e-5) -> None:
        for name in ("beta", "theta", "gamma", "v", "eta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if np.max(np.abs(self.eta[:, 0] - self.v)) > atol:
            raise ValueError("root joint eta[0] must equal root position v")


def group_frame(frame: MotionFrame):
    """Pack one frame into (position 25x3, rotation 25x6, shape 1x10) groups."""
    pos = np.concatenate([frame.v[None, :], frame.eta], axis=0)
    rot = np.concatenate([frame.gamma[None, :], frame.theta], axis=0)
    return pos, rot, frame.beta[None, :].copy()


def ungroup_frame(pos: np.ndarray, rot: np.ndarray, shape: np.ndarray) -> MotionFrame:
    return MotionFrame(beta=shape[0].copy(), theta=rot[1:].copy(), gamma=rot[0].copy(),
                       v=pos[0].copy(), eta=pos[1:].copy())


def group_clip(clip: MotionClip):
    """Vectorized :func:`group_frame`: arrays of shape (F,25,3), (F,25,6), (F,1,10)."""
    pos = np.concatenate([clip.v[:, None, :], clip.eta], axis=1)
    rot = np.concatenate([clip.gamma[:, None, :], clip.theta], axis=1)
    return pos, rot, clip.beta[:, None, :].copy()


def ungroup_clip(pos: np.ndarray, rot: np.ndarray, shape: np.ndarray, fps: int = 16) -> MotionClip:
    return MotionClip(beta=shape[:, 0].copy(), theta=rot[:, 1:].copy(), gamma=rot[:, 0].copy(),
                      v=pos[:, 0].copy(), eta=pos[:, 1:].copy(), fps=fps)


def motion_token_count(frames: int) -> int:
    return TOKENS_PER_FRAME * frames


# -- 6D rotations -------------------------------------------------------------


def rot6d_to_matrix(r6, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt a 6D rotation (first two matrix columns) into SO(3).

    Works on ``(..., 6)`` arrays; raises on zero or collinear inputs.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., :3], r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < eps):
        raise ValueError("degenerate 6D rotation: first column is zero")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < eps):
        raise ValueError("degenerate 6D rotation: columns are collinear")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(mat) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    return np.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)


# -- normalization --------------------------------------------------------------


@dataclass
class MotionStats:
    """Per-slot, per-channel mean/std of the three token groups."""

    mean: tuple = field(default_factory=lambda: tuple(np.zeros((n, d)) for n, d in zip(GROUP_TOKENS, GROUP_DIMS)))
    std: tuple = field(default_factory=lambda: tuple(np.ones((n, d)) for n, d in zip(GROUP_TOKENS, GROUP_DIMS)))

    MIN_STD = 1e-2

    @classmethod
    def from_clips(cls, clips) -> "MotionStats":
        groups = [group_clip(c) for c in clips]
        means, stds = [], []
        for g in range(3):
            stacked = np.concatenate([grp[g] for grp in groups], axis=0).astype(np.float64)
            means.append(stacked.mean(axis=0))
            stds.append(np.maximum(stacked.std(axis=0), cls.MIN_STD))
        return cls(tuple(means), tuple(stds))

    def normalize(self, groups):
        return tuple((g - m) / s for g, m, s in zip(groups, self.mean, self.std))

    def denormalize(self, groups):
        return tuple(g * s + m for g, m, s in zip(groups, self.mean, self.std))


def clip_to_latent(clip: MotionClip, stats: MotionStats):
    """Normalized token groups of a clip: the motion latent the flow runs on."""
    return tuple(g.astype(np.float64) for g in stats.normalize(group_clip(clip)))


def latent_to_clip(groups, stats: MotionStats, fps: int = 16) -> MotionClip:
    pos, rot, shape = stats.denormalize(tuple(np.asarray(g, dtype=np.float64) for g in groups))
    return ungroup_clip(pos, rot, shape, fps=fps)


# -- projectors -------------------------------------------------------------------

GROUP_NAMES = ("pos", "rot", "shape")


def init_projectors(rng: np.random.Generator, dim: int, mult: int = 4, zero_out: bool = True) -> dict:
    """Encoder and decoder MLP weights for the three groups.

    Encoders map ``d -> mult*dim -> dim``; decoders ``dim -> mult*dim -> d``.
    With ``zero_out`` the decoders' last layer starts at zero.
    """
    dt = nx.get_default_dtype()
    hidden = mult * dim
    w = {}
    for name, d in zip(GROUP_NAMES, GROUP_DIMS):
        w[f"motion_enc.{name}.fc1.w"] = rng.normal(0, 1 / np.sqrt(d), (d, hidden))
        w[f"motion_enc.{name}.fc1.b"] = np.zeros(hidden)
        w[f"motion_enc.{name}.fc2.w"] = rng.normal(0, 1 / np.sqrt(hidden), (hidden, dim))
        w[f"motion_enc.{name}.fc2.b"] = np.zeros(dim)
        w[f"motion_dec.{name}.fc1.w"] = rng.normal(0, 1 / np.sqrt(dim), (dim, hidden))
        w[f"motion_dec.{name}.fc1.b"] = np.zeros(hidden)
        w[f"motion_dec.{name}.fc2.w"] = (np.zeros((hidden, d)) if zero_out
                                         else rng.normal(0, 1 / np.sqrt(hidden), (hidden, d)))
        w[f"motion_dec.{name}.fc2.b"] = np.zeros(d)
    return {k: Tensor(v.astype(dt), requires_grad=True, name=k) for k, v in w.items()}


def _mlp(x: Tensor, weights, prefix: str) -> Tensor:
    h = nx.gelu(nx.linear(x, weights[f"{prefix}.fc1.w"], weights[f"{prefix}.fc1.b"]))
    return nx.linear(h, weights[f"{prefix}.fc2.w"], weights[f"{prefix}.fc2.b"])


def encode_groups(groups, weights) -> Tensor:
    """Project (F,25,3), (F,25,6), (F,1,10) groups to a (F*51, D) token sequence."""
    frames = groups[0].shape[0]
    parts = []
    for name, g, d in zip(GROUP_NAMES, groups, GROUP_DIMS):
        g = g if isinstance(g, Tensor) else Tensor(g)
        if g.shape[-1] != d or weights[f"motion_enc.{name}.fc1.w"].shape[0] != d:
            raise ValueError(f"{name} group has width {g.shape[-1]}, expected {d}")
        parts.append(_mlp(g, weights, f"motion_enc.{name}"))
    tokens = nx.concat(parts, axis=1)  # (F, 51, D)
    return tokens.reshape(frames * TOKENS_PER_FRAME, tokens.shape[-1])


def decode_groups(tokens: Tensor, weights) -> tuple[Tensor, Tensor, Tensor]:
    """Inverse layout of :func:`encode_groups` followed by the decoder MLPs."""
    n = tokens.shape[0]
    if n % TOKENS_PER_FRAME:
        raise ValueError(f"motion token count {n} is not a multiple of {TOKENS_PER_FRAME}")
    frames = n // TOKENS_PER_FRAME
    seq = tokens.reshape(frames, TOKENS_PER_FRAME, tokens.shape[-1])
    chunks = nx.split(seq, list(GROUP_TOKENS), axis=1)
    return tuple(_mlp(c, weights, f"motion_dec.{name}") for name, c in zip(GROUP_NAMES, chunks))


def encode_motion(clip: MotionClip, weights, stats: MotionStats | None = None) -> Tensor:
    """Clip -> (51*F, D) motion tokens (normalized with ``stats`` if given)."""
    groups = group_clip(clip)
    if stats is not None:
        groups = stats.normalize(groups)
    return encode_groups(tuple(g.astype(nx.get_default_dtype()) for g in groups), weights)


def decode_motion(tokens: Tensor, weights, stats: MotionStats | None = None, fps: int = 16) -> MotionClip:
    groups = tuple(g.data.astype(np.float64) for g in decode_groups(tokens, weights))
    if stats is not None:
        groups = stats.denormalize(groups)
    return ungroup_clip(*groups, fps=fps)

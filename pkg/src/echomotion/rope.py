"""3D rotary position encoding and its motion-video synchronized extension.

Video tokens sit on an integer ``(t, h, w)`` grid. Motion tokens of frame
``f`` and within-frame slot ``i`` are placed at ``(f / 4, H + i, W + i)``: the
temporal coordinate runs at the video-latent rate and the spatial coordinates
extend the video grid along its diagonal so the two modalities never share a
spatial index. ``collision_mode`` instead starts motion at ``(f / 4, i, i)``
(the positional-collision ablation).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

TEMPORAL_RATIO = 4


class Modality(enum.IntEnum):
    VIDEO = 0
    MOTION = 1


@dataclass(frozen=True)
class PositionIndex:
    t: float
    h: float
    w: float
    modality: Modality


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int = 16
    theta: float = 10000.0
    collision_mode: bool = False

    def __post_init__(self):
        if self.head_dim % 4:
            raise ValueError(f"head_dim must be divisible by 4, got {self.head_dim}")
        for n in self.axis_dims:
            if n % 2:
                raise ValueError(f"rope sub-dimensions must be even, got {self.axis_dims}")

    @property
    def axis_dims(self) -> tuple[int, int, int]:
        return self.head_dim // 2, self.head_dim // 4, self.head_dim // 4


def axis_frequencies(dims: int, theta: float = 10000.0) -> np.ndarray:
    if dims % 2:
        raise ValueError(f"rotary dims must be even, got {dims}")
    return theta ** (-2.0 * np.arange(dims // 2) / dims)


def rope_rotate(vec, pos: float, dims: int | None = None, theta: float = 10000.0) -> np.ndarray:
    """Rotate channel pairs ``(2j, 2j+1)`` of ``vec`` by ``pos * theta**(-2j/dims)``."""
    vec = np.asarray(vec, dtype=np.float64)
    dims = vec.shape[-1] if dims is None else dims
    if dims % 2:
        raise ValueError(f"rotary dims must be even, got {dims}")
    if not np.isfinite(pos):
        raise ValueError("position must be finite")
    ang = pos * axis_frequencies(dims, theta)
    c, s = np.cos(ang), np.sin(ang)
    x = vec[..., :dims].reshape(vec.shape[:-1] + (-1, 2))
    out = vec.copy()
    rot = np.stack([x[..., 0] * c - x[..., 1] * s, x[..., 0] * s + x[..., 1] * c], axis=-1)
    out[..., :dims] = rot.reshape(vec.shape[:-1] + (dims,))
    return out


def angles(positions: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Per-token rotation angles, shape ``(N, head_dim / 2)``.

    The first ``d_t/2`` angles come from the temporal coordinate, then ``d_h/2``
    from h and ``d_w/2`` from w.
    """
    positions = np.asarray(positions, dtype=np.float64)
    parts = [
        positions[:, axis : axis + 1] * axis_frequencies(d, cfg.theta)[None, :]
        for axis, d in enumerate(cfg.axis_dims)
    ]
    return np.concatenate(parts, axis=1)


def video_positions(t_lat: int, h_lat: int, w_lat: int) -> np.ndarray:
    """Row-major ``(t, h, w)`` grid, shape ``(t_lat*h_lat*w_lat, 3)``."""
    t, h, w = np.meshgrid(np.arange(t_lat), np.arange(h_lat), np.arange(w_lat), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1).astype(np.float64)


def motion_positions(frames: int, tokens_per_frame: int, h_lat: int, w_lat: int,
                     collision_mode: bool = False) -> np.ndarray:
    """Frame-major motion coordinates ``(f/4, H+i, W+i)`` (or ``(f/4, i, i)``)."""
    f = np.repeat(np.arange(frames), tokens_per_frame)
    i = np.tile(np.arange(tokens_per_frame), frames)
    off_h, off_w = (0, 0) if collision_mode else (h_lat, w_lat)
    return np.stack([f / TEMPORAL_RATIO, off_h + i, off_w + i], axis=1).astype(np.float64)


def index_position(index: PositionIndex, h_lat: int, w_lat: int,
                   collision_mode: bool = False) -> tuple[float, float, float]:
    """Validate a token index and return the coordinates its rotation uses.

    Motion indices carry ``t = f/4`` and spatial ``(H+i, W+i)`` as stored; in
    collision mode the spatial offset is removed again.
    """
    if index.modality == Modality.VIDEO:
        if not (0 <= index.h < h_lat and 0 <= index.w < w_lat):
            raise ValueError(f"video index {index} outside a {h_lat}x{w_lat} grid")
        if any(float(c) != int(c) for c in (index.t, index.h, index.w)):
            raise ValueError(f"video index {index} must be integral")
        return float(index.t), float(index.h), float(index.w)
    i_h, i_w = index.h - h_lat, index.w - w_lat
    if i_h < 0 or i_h != i_w:
        raise ValueError(f"motion index {index} is not on the diagonal extension of the grid")
    if collision_mode:
        return float(index.t), float(i_h), float(i_w)
    return float(index.t), float(index.h), float(index.w)


def apply_mvs_rope(vec, index: PositionIndex, h_lat: int, w_lat: int, cfg: RopeConfig) -> np.ndarray:
    """Rotate one head vector according to its (validated) position index."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != cfg.head_dim:
        raise ValueError(f"vector width {vec.shape[-1]} != head_dim {cfg.head_dim}")
    t, h, w = index_position(index, h_lat, w_lat, cfg.collision_mode)
    d_t, d_h, d_w = cfg.axis_dims
    return np.concatenate([
        rope_rotate(vec[..., :d_t], t, d_t, cfg.theta),
        rope_rotate(vec[..., d_t : d_t + d_h], h, d_h, cfg.theta),
        rope_rotate(vec[..., d_t + d_h :], w, d_w, cfg.theta),
    ], axis=-1)


@lru_cache(maxsize=64)
def _tables(key: tuple, head_dim: int, theta: float, dtype_name: str):
    t_lat, h_lat, w_lat, frames, per_frame, collision, with_video, with_motion = key
    cfg = RopeConfig(head_dim=head_dim, theta=theta, collision_mode=collision)
    parts = []
    if with_video:
        parts.append(video_positions(t_lat, h_lat, w_lat))
    if with_motion:
        parts.append(motion_positions(frames, per_frame, h_lat, w_lat, collision))
    pos = np.concatenate(parts, axis=0)
    ang = angles(pos, cfg)
    dt = np.dtype(dtype_name)
    cos, sin = np.cos(ang).astype(dt), np.sin(ang).astype(dt)
    cos.flags.writeable = False
    sin.flags.writeable = False
    return pos, cos, sin


def sequence_tables(t_lat: int, h_lat: int, w_lat: int, frames: int, per_frame: int,
                    cfg: RopeConfig, with_video: bool, with_motion: bool, dtype=np.float32):
    """Positions and cos/sin tables for a [video; motion] sequence (cached)."""
    key = (t_lat, h_lat, w_lat, frames, per_frame, cfg.collision_mode, with_video, with_motion)
    return _tables(key, cfg.head_dim, cfg.theta, np.dtype(dtype).name)


def tables_for_positions(positions: np.ndarray, cfg: RopeConfig, dtype=np.float32):
    ang = angles(positions, cfg)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)

"""Deterministic video "VAE": frame grouping with 4x temporal compression and patching.

Latent frame 0 holds frame 0 replicated four times; latent frame ``k >= 1``
holds frames ``4k-3 .. 4k``. Each ``s x s`` spatial patch of a latent frame is
flattened in ``(subframe, dy, dx, channel)`` order into a vector of length
``3 * 4 * s**2``. Pixel bytes map to floats in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

TEMPORAL_RATIO = 4


@dataclass
class VideoClip:
    frames: np.ndarray  # (F, H, W, 3) uint8
    fps: int = 16

    def __post_init__(self):
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"video frames must be uint8 (F, H, W, 3), got {self.frames.dtype} {self.frames.shape}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __len__(self) -> int:
        return self.num_frames


def check_geometry(frames: int, height: int, width: int, stride: int) -> None:
    if frames < 1 or (frames - 1) % TEMPORAL_RATIO:
        raise ValueError(f"frame count must be 1 mod {TEMPORAL_RATIO}, got {frames}")
    if stride < 1 or height < stride or width < stride or height % stride or width % stride:
        raise ValueError(f"frame size {height}x{width} is not divisible by stride {stride}")


def latent_shape(frames: int, height: int, width: int, stride: int) -> tuple[int, int, int]:
    check_geometry(frames, height, width, stride)
    return (frames - 1) // TEMPORAL_RATIO + 1, height // stride, width // stride


def video_token_count(frames: int, height: int, width: int, stride: int) -> int:
    t, h, w = latent_shape(frames, height, width, stride)
    return t * h * w


def patch_dim(stride: int) -> int:
    return 3 * TEMPORAL_RATIO * stride * stride


def to_float(frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float64) / 127.5 - 1.0


def to_bytes(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(values, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def group_frames(frames: np.ndarray) -> np.ndarray:
    """(F, H, W, C) -> (T_lat, 4, H, W, C) with frame 0 replicated."""
    first = np.repeat(frames[:1], TEMPORAL_RATIO, axis=0)
    rest = frames[1:].reshape((-1, TEMPORAL_RATIO) + frames.shape[1:])
    return np.concatenate([first[None], rest], axis=0)


def patchify(clip: VideoClip, stride: int) -> np.ndarray:
    """Raw patch vectors, shape ``(T_lat * H_lat * W_lat, 3*4*s^2)``, row-major over (t, h, w)."""
    f, hgt, wid, _ = clip.frames.shape
    t_lat, h_lat, w_lat = latent_shape(f, hgt, wid, stride)
    g = group_frames(to_float(clip.frames))  # (T, 4, H, W, 3)
    g = g.reshape(t_lat, TEMPORAL_RATIO, h_lat, stride, w_lat, stride, 3)
    g = g.transpose(0, 2, 4, 1, 3, 5, 6)  # t, h, w, sub, dy, dx, c
    return np.ascontiguousarray(g.reshape(t_lat * h_lat * w_lat, patch_dim(stride)))


def unpatchify(patches: np.ndarray, frames: int, height: int, width: int, stride: int,
               fps: int = 16, first_replica: int = 0) -> VideoClip:
    """Inverse of :func:`patchify`; frame 0 is read from replica ``first_replica``."""
    t_lat, h_lat, w_lat = latent_shape(frames, height, width, stride)
    patches = np.asarray(patches)
    if patches.shape != (t_lat * h_lat * w_lat, patch_dim(stride)):
        raise ValueError(f"patch array has shape {patches.shape}, expected {(t_lat * h_lat * w_lat, patch_dim(stride))}")
    g = patches.reshape(t_lat, h_lat, w_lat, TEMPORAL_RATIO, stride, stride, 3)
    g = g.transpose(0, 3, 1, 4, 2, 5, 6).reshape(t_lat, TEMPORAL_RATIO, height, width, 3)
    out = np.concatenate([g[0, first_replica][None], g[1:].reshape(-1, height, width, 3)], axis=0)
    return VideoClip(to_bytes(out), fps=fps)


def embed_patches(patches, w_in: Tensor, b_in: Tensor | None = None) -> Tensor:
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape[-1] != w_in.shape[0]:
        raise ValueError(f"patch width {patches.shape[-1]} != embedding rows {w_in.shape[0]}")
    return nx.linear(patches, w_in, b_in)


def unembed(grid: Tensor, w_out: Tensor, b_out: Tensor | None = None) -> Tensor:
    if grid.shape[-1] != w_out.shape[0]:
        raise ValueError(f"hidden width {grid.shape[-1]} != unembedding rows {w_out.shape[0]}")
    return nx.linear(grid, w_out, b_out)


# -- Gaussian patch prior ------------------------------------------------------------


@dataclass
class PatchStats:
    """Mean and principal axes of the patch distribution.

    The network's video output is added to the closed-form velocity of a
    Gaussian fit to these statistics. With ``D < patch_dim`` the learned
    unembedding alone cannot reach every patch direction, so the prior carries
    the directions the network cannot.
    """

    mean: np.ndarray  # (P,)
    basis: np.ndarray  # (P, P) orthonormal columns
    var: np.ndarray  # (P,)

    MIN_VAR = 1e-4

    @classmethod
    def identity(cls, dim: int) -> "PatchStats":
        return cls(np.zeros(dim), np.eye(dim), np.ones(dim))

    @classmethod
    def from_patches(cls, patches: np.ndarray) -> "PatchStats":
        x = np.asarray(patches, dtype=np.float64)
        mean = x.mean(axis=0)
        cov = np.cov(x - mean, rowvar=False, bias=True)
        var, basis = np.linalg.eigh(cov)
        # fix eigenvector signs so the stats are reproducible bit for bit
        signs = np.where(basis[np.abs(basis).argmax(axis=0), np.arange(basis.shape[1])] < 0, -1.0, 1.0)
        return cls(mean, basis * signs, np.maximum(var, cls.MIN_VAR))

    def velocity(self, x_t: np.ndarray, t: float) -> np.ndarray:
        """E[x1 - x0 | x_t] when x1 ~ N(mean, basis diag(var) basis^T), x0 ~ N(0, I)."""
        a = (t * self.var - (1.0 - t)) / (t * t * self.var + (1.0 - t) ** 2)
        z = (np.asarray(x_t, dtype=np.float64) - t * self.mean) @ self.basis
        return self.mean + (z * a) @ self.basis.T

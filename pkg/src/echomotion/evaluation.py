"""Pose error, attention alignment and smoothness metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion import MotionClip
from .rope import TEMPORAL_RATIO


def _joints(clip) -> np.ndarray:
    return np.asarray(clip.eta if isinstance(clip, MotionClip) else clip, dtype=np.float64)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"expected (F, J, 3) joints, got {pred.shape}")


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error in millimeters after aligning the root
    joint of every frame."""
    p, g = _joints(pred), _joints(gt)
    _check_pair(p, g)
    p = p - p[:, :1]
    g = g - g[:, :1]
    return float(np.linalg.norm(p - g, axis=-1).mean() * 1000.0)


def similarity_align(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Best similarity transform of ``src`` (J,3) onto ``dst`` (Umeyama)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = float((xs * xs).sum())
    if var_s == 0.0:
        return np.broadcast_to(mu_d, src.shape).copy()
    u, s, vt = np.linalg.svd(xd.T @ xs)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((s * d).sum()) / var_s
    return scale * xs @ rot.T + mu_d


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after a per-frame Procrustes (rotation, scale, translation) alignment."""
    p, g = _joints(pred), _joints(gt)
    _check_pair(p, g)
    aligned = np.stack([similarity_align(p[f], g[f]) for f in range(len(p))])
    return float(np.linalg.norm(aligned - g, axis=-1).mean() * 1000.0)


def joint_rms(pred, gt, procrustes: bool = False) -> float:
    """Root-mean-square joint error in millimeters, root-aligned or Procrustes-aligned.

    Procrustes minimizes exactly this quantity, so the aligned value never
    exceeds the root-aligned one (mean-of-norms PA-MPJPE carries no such bound).
    """
    p, g = _joints(pred), _joints(gt)
    _check_pair(p, g)
    if procrustes:
        p = np.stack([similarity_align(p[f], g[f]) for f in range(len(p))])
    else:
        p, g = p - p[:, :1], g - g[:, :1]
    return float(np.sqrt(((p - g) ** 2).sum(-1).mean()) * 1000.0)


def jerk(clip, fps: int | None = None) -> float:
    """Mean norm of the third time difference of joint positions, in m/s^3."""
    eta = _joints(clip)
    fps = fps if fps is not None else getattr(clip, "fps", None)
    if fps is None:
        raise ValueError("fps is required for raw joint arrays")
    if eta.shape[0] < 4:
        raise ValueError(f"jerk needs at least 4 frames, got {eta.shape[0]}")
    d3 = np.diff(eta, n=3, axis=0)
    return float(np.linalg.norm(d3, axis=-1).mean() * fps**3)


# -- attention alignment -----------------------------------------------------------------


@dataclass
class AttnAlignmentReport:
    mean_offset: float
    diag_mass: float
    per_layer: list = field(default_factory=list)  # (layer, offset, mass)

    def as_dict(self) -> dict:
        d = {"attn_mean_offset": self.mean_offset, "attn_diag_mass": self.diag_mass}
        for layer, off, mass in self.per_layer:
            d[f"attn_offset_l{layer}"] = off
            d[f"attn_mass_l{layer}"] = mass
        return d


def cross_modal_block(probs: np.ndarray, n_video: int) -> np.ndarray:
    """Video-query x motion-key rows of ``(heads, N, N)`` attention, renormalized."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 2:
        probs = probs[None]
    if n_video <= 0 or probs.shape[-1] <= n_video:
        raise ValueError("attention map has no video-query x motion-key sub-matrix")
    sub = probs[:, :n_video, n_video:]
    total = sub.sum(axis=-1, keepdims=True)
    return np.divide(sub, total, out=np.zeros_like(sub), where=total > 0)


def alignment_from_block(block: np.ndarray, video_t: np.ndarray, motion_t: np.ndarray) -> tuple[float, float]:
    """Expected |t_video - t_motion| and mass within one latent step."""
    off = np.abs(np.asarray(video_t, dtype=np.float64)[:, None] - np.asarray(motion_t, dtype=np.float64)[None, :])
    return float((block * off).sum(-1).mean()), float((block * (off <= 1.0)).sum(-1).mean())


def attn_diagonal_score(maps, video_t: np.ndarray, motion_t: np.ndarray) -> AttnAlignmentReport:
    """Alignment report from attention probes.

    ``maps`` is a list of ``{"layer", "probs", "n_video"}`` entries (as stored
    by the model's forward pass) or of raw ``(probs, n_video)`` pairs. Entries
    with the same layer (several probe clips) are averaged.
    """
    per: dict[int, list] = {}
    for i, entry in enumerate(maps):
        if isinstance(entry, dict):
            layer, probs, n_video = entry["layer"], entry["probs"], entry["n_video"]
        else:
            (probs, n_video), layer = entry, i
        per.setdefault(layer, []).append(alignment_from_block(cross_modal_block(probs, n_video), video_t, motion_t))
    if not per:
        raise ValueError("no attention maps given")
    rows = [(layer, float(np.mean([o for o, _ in v])), float(np.mean([m for _, m in v]))) for layer, v in sorted(per.items())]
    return AttnAlignmentReport(float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])), rows)


def token_times(t_lat: int, h_lat: int, w_lat: int, frames: int, per_frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Temporal coordinates of the video tokens and motion tokens."""
    video_t = np.repeat(np.arange(t_lat, dtype=np.float64), h_lat * w_lat)
    motion_t = np.repeat(np.arange(frames, dtype=np.float64) / TEMPORAL_RATIO, per_frame)
    return video_t, motion_t


# -- reporting ------------------------------------------------------------------------


def format_metrics(metrics: dict) -> str:
    return "\n".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()) + "\n"


def append_csv(path, row: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            w.writeheader()
        w.writerow(row)

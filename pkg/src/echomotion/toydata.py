"""Synthetic paired motion/video/caption corpus.

Motions are procedural pose trajectories on a 24-joint SMPL-like skeleton,
posed by forward kinematics. Videos are orthographic front-view stick figures
where each limb chain gets its own color, which makes joint positions
recoverable from pixels (see :func:`chain_centroids_from_frame`). Captions
are short templated sentences over a fixed vocabulary.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .motion import NUM_JOINTS, MotionClip, matrix_to_rot6d
from .video import TEMPORAL_RATIO, VideoClip

# -- skeleton -----------------------------------------------------------------------

PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle", "r_ankle",
    "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head", "l_shoulder",
    "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)
# rest offsets from the parent, meters, y up, figure facing +z (its left is +x)
REST_OFFSETS = np.array([
    [0.0, 0.95, 0.0],
    [0.09, -0.08, 0.0], [-0.09, -0.08, 0.0], [0.0, 0.11, 0.0],
    [0.0, -0.40, 0.0], [0.0, -0.40, 0.0], [0.0, 0.13, 0.0],
    [0.0, -0.40, 0.0], [0.0, -0.40, 0.0], [0.0, 0.05, 0.0],
    [0.0, -0.05, 0.12], [0.0, -0.05, 0.12], [0.0, 0.22, 0.0],
    [0.07, 0.15, 0.0], [-0.07, 0.15, 0.0], [0.0, 0.13, 0.0],
    [0.10, 0.02, 0.0], [-0.10, 0.02, 0.0],
    [0.06, -0.25, 0.0], [-0.06, -0.25, 0.0],
    [0.02, -0.25, 0.0], [-0.02, -0.25, 0.0],
    [0.0, -0.08, 0.0], [0.0, -0.08, 0.0],
])

CHAINS = {
    "torso": (3, 6, 9, 12, 15),
    "l_arm": (13, 16, 18, 20, 22),
    "r_arm": (14, 17, 19, 21, 23),
    "l_leg": (1, 4, 7, 10),
    "r_leg": (2, 5, 8, 11),
}
CHAIN_ORDER = ("torso", "l_leg", "r_leg", "l_arm", "r_arm")
R_ARM_MOVING = (19, 21, 23)


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def forward_kinematics(local_rots: np.ndarray, root: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Joint positions from per-joint local rotations (24,3,3) and root position.

    ``local_rots[0]`` is the global orientation; children hang off their
    parent at ``R_parent @ (scale * offset)``.
    """
    glob = np.empty((NUM_JOINTS, 3, 3))
    pos = np.empty((NUM_JOINTS, 3))
    glob[0] = local_rots[0]
    pos[0] = root
    for j in range(1, NUM_JOINTS):
        p = PARENTS[j]
        glob[j] = glob[p] @ local_rots[j]
        pos[j] = pos[p] + glob[p] @ (scale * REST_OFFSETS[j])
    return pos


# -- motions ------------------------------------------------------------------------


class MotionKind(enum.IntEnum):
    WAVE = 0
    WALK = 1
    SQUAT = 2
    SPIN = 3
    JUMP = 4
    IDLE = 5


KIND_RANGES = {
    MotionKind.WAVE: {"amp": (0.4, 0.8), "freq": (1.0, 2.0)},
    MotionKind.WALK: {"amp": (0.3, 0.5), "freq": (0.8, 1.4)},
    MotionKind.SQUAT: {"amp": (0.4, 0.7), "freq": (0.6, 1.0)},
    MotionKind.SPIN: {"amp": (2.0, 4.0), "freq": (0.0, 0.0)},
    MotionKind.JUMP: {"amp": (0.08, 0.15), "freq": (0.8, 1.2)},
    MotionKind.IDLE: {"amp": (0.0, 0.0), "freq": (0.0, 0.0)},
}


def _pose(kind: MotionKind, tau: float, amp: float, freq: float, phase: float, direction: float):
    """Local rotations and root offset (relative to standing) at time ``tau`` seconds."""
    rots = np.tile(np.eye(3), (NUM_JOINTS, 1, 1))
    root = np.zeros(3)
    w = 2 * np.pi * freq * tau + phase
    if kind == MotionKind.WAVE:
        rots[17] = rot_z(-(2.0 + 0.5 * amp * np.sin(w)))
        rots[19] = rot_z(-(0.4 + 0.6 * amp * np.sin(w + 0.7)))
    elif kind == MotionKind.WALK:
        rots[0] = rot_y(direction * np.pi / 2)
        swing = amp * np.sin(w)
        rots[1], rots[2] = rot_x(-swing), rot_x(swing)
        rots[4] = rot_x(0.6 * amp * (1 + np.sin(w + 1.2)))
        rots[5] = rot_x(0.6 * amp * (1 - np.sin(w + 1.2)))
        rots[16], rots[17] = rot_x(swing), rot_x(-swing)
        root[1] = -0.02 * (1 - np.cos(2 * w))
    elif kind == MotionKind.SQUAT:
        phi = amp * 0.5 * (1 - np.cos(w))
        rots[1], rots[2] = rot_z(phi), rot_z(-phi)
        rots[4], rots[5] = rot_z(-2 * phi), rot_z(2 * phi)
        root[1] = -0.8 * (1 - np.cos(phi))
        rots[16], rots[17] = rot_z(0.8 * phi), rot_z(-0.8 * phi)
    elif kind == MotionKind.SPIN:
        rots[0] = rot_y(direction * amp * tau + phase)
        rots[16], rots[17] = rot_z(1.0), rot_z(-1.0)
    elif kind == MotionKind.JUMP:
        s = np.sin(np.pi * freq * tau + phase / 2)
        root[1] = amp * s * s
        lift = 2.0 * s * s
        rots[16], rots[17] = rot_z(lift), rot_z(-lift)
    return rots, root


def gen_motion_clip(kind: MotionKind, seed: int, frames: int = 17, fps: int = 16) -> MotionClip:
    """Deterministic procedural clip of ``kind``; ``frames`` must be 1 mod 4."""
    if frames < 1 or (frames - 1) % TEMPORAL_RATIO:
        raise ValueError(f"frame count must be 1 mod {TEMPORAL_RATIO}, got {frames}")
    if fps <= 0:
        raise ValueError("fps must be positive")
    kind = MotionKind(kind)
    rng = np.random.default_rng([int(seed), int(kind), 17])
    beta = rng.normal(0.0, 0.5, 10)
    scale = 1.0 + 0.05 * beta[0]
    rg = KIND_RANGES[kind]
    amp = rng.uniform(*rg["amp"])
    freq = rng.uniform(*rg["freq"])
    phase = rng.uniform(0, 2 * np.pi)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    x0 = rng.uniform(-0.15, 0.15)
    speed = rng.uniform(0.4, 0.7) if kind == MotionKind.WALK else 0.0
    if kind in (MotionKind.IDLE,):
        phase = 0.0

    betas = np.tile(beta, (frames, 1))
    theta = np.empty((frames, NUM_JOINTS, 6))
    gamma = np.empty((frames, 6))
    v = np.empty((frames, 3))
    eta = np.empty((frames, NUM_JOINTS, 3))
    duration = (frames - 1) / fps
    for f in range(frames):
        tau = f / fps
        rots, off = _pose(kind, tau, amp, freq, phase, direction)
        root = scale * REST_OFFSETS[0] + off
        root[0] += x0 + direction * speed * (tau - duration / 2)
        pos = forward_kinematics(rots, root, scale)
        theta[f] = matrix_to_rot6d(rots)
        gamma[f] = theta[f, 0]
        v[f] = root
        eta[f] = pos
    # keep every value float32-representable so the container round trip is exact
    r = lambda a: a.astype(np.float32).astype(np.float64)
    return MotionClip(beta=r(betas), theta=r(theta), gamma=r(gamma), v=r(v), eta=r(eta), fps=fps)


# -- captions -----------------------------------------------------------------------

SUBJECTS = ("person", "man", "woman", "dancer", "athlete", "child")
COLORS = ("red", "blue", "white", "orange", "purple")
GARMENTS = ("shirt", "jacket", "hoodie", "sweater")
VERBS = {
    MotionKind.WAVE: "waves", MotionKind.WALK: "walks", MotionKind.SQUAT: "squats",
    MotionKind.SPIN: "spins", MotionKind.JUMP: "jumps", MotionKind.IDLE: "stands",
}
BACKGROUNDS = ("black", "charcoal", "navy", "olive", "plum")
FILLERS = ("a", "in", "against", "background")

VOCAB = FILLERS + SUBJECTS + COLORS + GARMENTS + tuple(VERBS.values()) + BACKGROUNDS
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = len(VOCAB)
VOCAB_SIZE = len(VOCAB) + 1  # including PAD
MAX_CAPTION = 16

COLOR_RGB = {
    "red": (230, 40, 40), "blue": (60, 90, 255), "white": (240, 240, 240),
    "orange": (255, 130, 0), "purple": (160, 60, 230),
}
BACKGROUND_RGB = {
    "black": (8, 8, 8), "charcoal": (45, 45, 50), "navy": (10, 15, 60),
    "olive": (50, 50, 15), "plum": (45, 10, 40),
}
LIMB_RGB = {
    "l_arm": (240, 230, 40), "r_arm": (0, 220, 240),
    "l_leg": (240, 0, 200), "r_leg": (0, 200, 60),
}


@dataclass(frozen=True)
class Style:
    subject: str
    color: str
    garment: str
    background: str

    def palette(self) -> dict[str, np.ndarray]:
        pal = {"background": np.array(BACKGROUND_RGB[self.background], dtype=np.float64),
               "torso": np.array(COLOR_RGB[self.color], dtype=np.float64)}
        for k, c in LIMB_RGB.items():
            pal[k] = np.array(c, dtype=np.float64)
        return pal


def style_from_seed(seed: int) -> Style:
    rng = np.random.default_rng([int(seed), 99])
    return Style(
        subject=SUBJECTS[rng.integers(len(SUBJECTS))],
        color=COLORS[rng.integers(len(COLORS))],
        garment=GARMENTS[rng.integers(len(GARMENTS))],
        background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
    )


def caption_words(kind: MotionKind, style_seed: int) -> list[str]:
    st = style_from_seed(style_seed)
    return ["a", st.subject, "in", "a", st.color, st.garment, VERBS[MotionKind(kind)],
            "against", "a", st.background, "background"]


def gen_caption(kind: MotionKind, style_seed: int) -> list[int]:
    return [WORD_TO_ID[w] for w in caption_words(kind, style_seed)]


def decode_caption(ids) -> str:
    return " ".join(VOCAB[i] for i in ids if i != PAD_ID)


def pad_caption(ids, length: int = MAX_CAPTION, pad_id: int = PAD_ID) -> np.ndarray:
    """Truncate or pad to ``length``; models pad with the last row of their text table."""
    ids = list(ids)[:length]
    return np.array(ids + [pad_id] * (length - len(ids)), dtype=np.int64)


# -- rendering ------------------------------------------------------------------------


def pixels_per_meter(height: int) -> float:
    return height / 2.25


def project(points: np.ndarray, height: int, width: int) -> np.ndarray:
    """Orthographic front view: world (x, y) meters -> image (u, v) pixels."""
    ppm = pixels_per_meter(height)
    u = width / 2.0 + points[..., 0] * ppm
    v = height * 31.0 / 32.0 - points[..., 1] * ppm
    return np.stack([u, v], axis=-1)


def chain_bones(chain: str) -> list[tuple[int, int]]:
    return [(PARENTS[j], j) for j in CHAINS[chain]]


def _segment_coverage(uv: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    ap = uv - a
    t = np.clip(ap @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(uv.shape[:-1])
    d = np.linalg.norm(ap - t[..., None] * ab, axis=-1)
    return np.clip(radius + 0.5 - d, 0.0, 1.0)


LINE_RADIUS = 0.6


def render_frame(eta: np.ndarray, style: Style, height: int, width: int) -> np.ndarray:
    pal = style.palette()
    uv_img = np.stack(np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5, indexing="xy"), axis=-1)
    joints = project(eta, height, width)
    img = np.broadcast_to(pal["background"], (height, width, 3)).copy()
    for chain in CHAIN_ORDER:
        cov = np.zeros((height, width))
        for p, c in chain_bones(chain):
            cov = np.maximum(cov, _segment_coverage(uv_img, joints[p], joints[c], LINE_RADIUS))
        img = img * (1.0 - cov[..., None]) + pal[chain] * cov[..., None]
    return np.rint(img).astype(np.uint8)


def render_clip(clip: MotionClip, style_seed: int, height: int = 32, width: int = 32) -> VideoClip:
    if height < 8 or width < 8:
        raise ValueError(f"image size {height}x{width} is too small to render")
    style = style_from_seed(style_seed)
    frames = np.stack([render_frame(clip.eta[f], style, height, width) for f in range(clip.num_frames)])
    return VideoClip(frames, fps=clip.fps)


# -- centroid oracle ------------------------------------------------------------------


def chain_weights(frame: np.ndarray, style: Style) -> dict[str, np.ndarray]:
    """Per-pixel soft membership of each chain, by projecting pixel colors onto
    the background->chain color lines and keeping the best-fitting chain."""
    pal = style.palette()
    px = frame.astype(np.float64) - pal["background"]
    alphas, resid = [], []
    for chain in CHAIN_ORDER:
        d = pal[chain] - pal["background"]
        a = np.clip(px @ d / float(d @ d), 0.0, 1.0)
        alphas.append(a)
        resid.append(np.linalg.norm(px - a[..., None] * d, axis=-1))
    alphas, resid = np.stack(alphas), np.stack(resid)
    best = resid.argmin(axis=0)
    out = {}
    for i, chain in enumerate(CHAIN_ORDER):
        w = np.where(best == i, alphas[i], 0.0)
        w[w < 0.15] = 0.0
        out[chain] = w
    return out


def chain_centroids_from_frame(frame: np.ndarray, style: Style) -> dict[str, np.ndarray]:
    h, w = frame.shape[:2]
    uv = np.stack(np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5, indexing="xy"), axis=-1)
    out = {}
    for chain, wt in chain_weights(frame, style).items():
        total = wt.sum()
        out[chain] = (wt[..., None] * uv).sum(axis=(0, 1)) / total if total > 0 else np.full(2, np.nan)
    return out


def chain_centroids_from_joints(eta: np.ndarray, height: int, width: int) -> dict[str, np.ndarray]:
    """Length-weighted mean of projected bone midpoints per chain."""
    joints = project(eta, height, width)
    out = {}
    for chain in CHAINS:
        mids, lens = [], []
        for p, c in chain_bones(chain):
            mids.append(0.5 * (joints[p] + joints[c]))
            lens.append(np.linalg.norm(joints[c] - joints[p]))
        lens = np.asarray(lens)
        out[chain] = (np.asarray(mids) * lens[:, None]).sum(0) / lens.sum() if lens.sum() > 0 else np.mean(mids, 0)
    return out


def centroid_error(video: VideoClip, eta: np.ndarray, style: Style) -> float:
    """Mean pixel distance between image-detected and joint-derived chain centroids.

    Chains the detector cannot find (fully occluded) are skipped.
    """
    h, w = video.frames.shape[1:3]
    errs = []
    for f in range(video.num_frames):
        img = chain_centroids_from_frame(video.frames[f], style)
        ref = chain_centroids_from_joints(eta[f], h, w)
        for chain in CHAINS:
            if np.all(np.isfinite(img[chain])):
                errs.append(np.linalg.norm(img[chain] - ref[chain]))
    return float(np.mean(errs)) if errs else float("inf")


# -- records and container --------------------------------------------------------------


@dataclass
class DatasetRecord:
    motion: MotionClip
    video: VideoClip
    caption: list[int]
    kind: MotionKind
    seed: int


def gen_record(kind: MotionKind, seed: int, frames: int = 17, size: int = 32, fps: int = 16) -> DatasetRecord:
    clip = gen_motion_clip(kind, seed, frames, fps)
    return DatasetRecord(clip, render_clip(clip, seed, size, size), gen_caption(kind, seed), MotionKind(kind), int(seed))


def record_seed(base_seed: int, index: int) -> int:
    return int(base_seed) * 1_000_003 + int(index)


def gen_corpus(count: int, seed: int, kinds=tuple(MotionKind), frames: int = 17, size: int = 32,
               fps: int = 16) -> list[DatasetRecord]:
    kinds = [MotionKind(k) for k in kinds]
    if not kinds:
        raise ValueError("at least one motion kind is required")
    return [gen_record(kinds[i % len(kinds)], record_seed(seed, i), frames, size, fps) for i in range(count)]


class DatasetFormatError(ValueError):
    pass


MAGIC = b"HMVD"
VERSION = 1
_HEADER = struct.Struct("<IIIIIQI")


def _write_record(fh, rec: DatasetRecord) -> None:
    m, vid = rec.motion, rec.video.frames
    f, h, w, _ = vid.shape
    if m.num_frames != f:
        raise ValueError("motion and video frame counts differ")
    fh.write(_HEADER.pack(f, h, w, m.fps, int(rec.kind), rec.seed, len(rec.caption)))
    for arr in (m.beta, m.theta, m.gamma, m.v, m.eta):
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    fh.write(np.ascontiguousarray(vid, dtype=np.uint8).tobytes())
    fh.write(np.asarray(rec.caption, dtype="<u2").tobytes())


def write_dataset(records, path) -> None:
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(records)))
        for rec in records:
            _write_record(fh, rec)


def _take(buf: memoryview, off: int, n: int):
    if off + n > len(buf):
        raise DatasetFormatError(f"truncated dataset: need {n} bytes at offset {off}, have {len(buf) - off}")
    return buf[off : off + n], off + n


def read_dataset(path) -> list[DatasetRecord]:
    buf = memoryview(Path(path).read_bytes())
    head, off = _take(buf, 0, 16)
    if bytes(head[:4]) != MAGIC:
        raise DatasetFormatError(f"bad magic {bytes(head[:4])!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<IQ", head[4:])
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    records = []
    for _ in range(count):
        hb, off = _take(buf, off, _HEADER.size)
        f, h, w, fps, kind, seed, ncap = _HEADER.unpack(hb)
        arrays = []
        for shape in ((f, 10), (f, 24, 6), (f, 6), (f, 3), (f, 24, 3)):
            n = int(np.prod(shape)) * 4
            raw, off = _take(buf, off, n)
            arrays.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64))
        raw, off = _take(buf, off, f * h * w * 3)
        frames = np.frombuffer(raw, dtype=np.uint8).reshape(f, h, w, 3).copy()
        raw, off = _take(buf, off, 2 * ncap)
        caption = np.frombuffer(raw, dtype="<u2").astype(int).tolist()
        try:
            motion = MotionClip(*arrays, fps=fps)
            video = VideoClip(frames, fps=fps)
            kind = MotionKind(kind)
        except ValueError as exc:
            raise DatasetFormatError(f"invalid record: {exc}") from exc
        records.append(DatasetRecord(motion, video, caption, kind, seed))
    if off != len(buf):
        raise DatasetFormatError(f"{len(buf) - off} trailing bytes after {count} records")
    return records

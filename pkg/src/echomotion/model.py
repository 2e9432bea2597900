"""Dual-modality diffusion transformer.

Video patches and motion tokens are embedded separately, concatenated into one
sequence for self-attention (with MVS-RoPE on q and k), then split again for
per-modality text cross-attention and feed-forward layers. Each modality owns
its projection weights unless ``share_modality_weights`` is set, in which case
a single weight set serves both (the single-stream ablation).

Parameters live in a flat ``name -> Tensor`` dict. Names decide branch
membership: everything motion-specific (``motion_*``, ``blocks.*.motion.*``,
``final.motion.*``, ``task.*``) is the motion branch, the rest is the video
branch that stays frozen while the motion branch is pretrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig, Phase, TaskMode
from .motion import (
    GROUP_DIMS,
    GROUP_TOKENS,
    TOKENS_PER_FRAME,
    MotionStats,
    decode_groups,
    encode_groups,
    init_projectors,
)
from .numerics import Tensor
from .rope import sequence_tables
from .video import PatchStats

MOTION_WIDTH = sum(n * d for n, d in zip(GROUP_TOKENS, GROUP_DIMS))  # 235 values per frame
_GROUP_SLICES = (slice(0, 75), slice(75, 225), slice(225, 235))


def is_motion_param(name: str) -> bool:
    parts = name.split(".")
    return (parts[0] in ("motion_enc", "motion_dec", "task")
            or (parts[0] == "blocks" and parts[2] == "motion")
            or (parts[0] == "final" and parts[1] == "motion"))


def branch_of(name: str) -> str:
    return "motion" if is_motion_param(name) else "video"


# -- parameter construction ---------------------------------------------------------


def _linear_init(rng, fan_in: int, fan_out: int, zero: bool = False):
    if zero:
        return np.zeros((fan_in, fan_out)), np.zeros(fan_out)
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), np.zeros(fan_out)


def _block_params(rng, prefix: str, dim: int, mlp: int, zero_init: bool) -> dict:
    p = {}

    def lin(name, i, o, zero=False):
        p[f"{prefix}.{name}.w"], p[f"{prefix}.{name}.b"] = _linear_init(rng, i, o, zero and zero_init)

    lin("ada", dim, 6 * dim, zero=True)
    lin("qkv", dim, 3 * dim)
    lin("attn_out", dim, dim)
    lin("cross_q", dim, dim)
    lin("cross_kv", dim, 2 * dim)
    lin("cross_out", dim, dim, zero=True)
    lin("fc1", dim, mlp * dim)
    lin("fc2", mlp * dim, dim)
    return p


def init_params(cfg: ModelConfig, seed: int = 0, zero_init: bool = True) -> dict[str, Tensor]:
    """Fresh parameters. ``zero_init`` applies the adaLN-Zero style zero
    initialization of gates and output layers; tests switch it off to get
    non-trivial gradients everywhere."""
    cfg.validate()
    rng = np.random.default_rng([seed, 7])
    d, p_dim = cfg.dim, cfg.patch_dim
    w: dict[str, np.ndarray] = {}

    def lin(name, i, o, zero=False):
        w[f"{name}.w"], w[f"{name}.b"] = _linear_init(rng, i, o, zero and zero_init)

    lin("time.fc1", d, d)
    lin("time.fc2", d, d)
    w["text.table"] = rng.normal(0.0, 1.0, (cfg.text_vocab, d))
    w["text.null"] = rng.normal(0.0, 1.0, (cfg.text_len, d))
    lin("video_in", p_dim, d)
    lin("video_out", d, p_dim, zero=True)
    lin("final.video.ada", d, 2 * d, zero=True)
    lin("final.motion.ada", d, 2 * d, zero=True)
    w["task.table"] = rng.normal(0.0, 1.0, (len(TaskMode), d))
    lin("task.fc1", d, d)
    lin("task.fc2", d, d, zero=True)
    for i in range(cfg.layers):
        dual = i >= cfg.video_only_layers
        if cfg.share_modality_weights:
            mods = ("shared",)
        else:
            mods = ("video", "motion") if dual else ("video",)
        for m in mods:
            w.update(_block_params(rng, f"blocks.{i}.{m}", d, cfg.mlp_ratio, zero_init))
    dt = nx.get_default_dtype()
    params = {k: Tensor(v.astype(dt), requires_grad=True, name=k) for k, v in w.items()}
    params.update(init_projectors(rng, d, cfg.mlp_ratio, zero_out=zero_init))
    for k, v in params.items():
        v.data = v.data.astype(dt)
    return dict(sorted(params.items()))


# -- building blocks ------------------------------------------------------------------


def timestep_embedding(t: float, dim: int, scale: float = 1000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = scale * float(t) * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)])


def _lin(x: Tensor, w, name: str) -> Tensor:
    return nx.linear(x, w[f"{name}.w"], w[f"{name}.b"])


def _heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge(x: Tensor) -> Tensor:
    h, n, hd = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * hd)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return nx.layer_norm(x) * (scale + 1.0) + shift


def joint_self_attention(qkvs: list[Tensor], cos: np.ndarray, sin: np.ndarray, heads: int,
                         store: list | None = None) -> list[Tensor]:
    """Attention over the concatenation of per-modality ``(N_i, 3D)`` qkv rows.

    q and k are rotated with the tables of the concatenated sequence; the
    output is split back into per-modality ``(N_i, D)`` pieces.
    """
    qkvs = [x for x in qkvs]
    sizes = [x.shape[0] for x in qkvs]
    if len({x.shape[1] for x in qkvs}) != 1 or qkvs[0].shape[1] % (3 * heads):
        raise ValueError("qkv widths must agree and split evenly into heads")
    seq = nx.concat(qkvs, axis=0) if len(qkvs) > 1 else qkvs[0]
    if cos.shape[0] != seq.shape[0]:
        raise ValueError(f"rotary tables cover {cos.shape[0]} tokens, sequence has {seq.shape[0]}")
    d = seq.shape[1] // 3
    q, k, v = nx.split(seq, [d, d, d], axis=1)
    q = nx.rope(_heads(q, heads), cos, sin)
    k = nx.rope(_heads(k, heads), cos, sin)
    out = _merge(nx.attention(q, k, _heads(v, heads), store=store))
    return nx.split(out, sizes, axis=0) if len(sizes) > 1 else [out]


def dual_block_forward(streams: dict[str, Tensor], w, prefixes: dict[str, str], temb_act: Tensor,
                       text_ctx: Tensor, cos: np.ndarray, sin: np.ndarray, heads: int,
                       store: list | None = None) -> dict[str, Tensor]:
    """One block over the modalities present in ``streams`` (ordered video, motion).

    ``prefixes`` maps each modality to its weight prefix. A video-only block is
    the same function called with only the video stream.
    """
    mods = list(streams)
    d = temb_act.shape[-1]
    chunks = {m: nx.split(_lin(temb_act, w, f"{prefixes[m]}.ada"), [d] * 6) for m in mods}
    qkvs = []
    for m in mods:
        sh1, sc1 = chunks[m][0], chunks[m][1]
        qkvs.append(_lin(_modulate(streams[m], sh1, sc1), w, f"{prefixes[m]}.qkv"))
    attn = joint_self_attention(qkvs, cos, sin, heads, store)
    out = {}
    for m, a in zip(mods, attn):
        pre = prefixes[m]
        sh1, sc1, g1, sh2, sc2, g2 = chunks[m]
        x = streams[m] + g1 * _lin(a, w, f"{pre}.attn_out")
        q = _heads(_lin(nx.layer_norm(x), w, f"{pre}.cross_q"), heads)
        kv = _lin(text_ctx, w, f"{pre}.cross_kv")
        k, v = nx.split(kv, [d, d], axis=1)
        x = x + _lin(_merge(nx.attention(q, _heads(k, heads), _heads(v, heads))), w, f"{pre}.cross_out")
        h = nx.gelu(_lin(_modulate(x, sh2, sc2), w, f"{pre}.fc1"))
        out[m] = x + g2 * _lin(h, w, f"{pre}.fc2")
    return out


def video_block_forward(streams: dict[str, Tensor], w, prefix: str, temb_act: Tensor, text_ctx: Tensor,
                        cos: np.ndarray, sin: np.ndarray, heads: int) -> dict[str, Tensor]:
    """Video-only block; any motion stream passes through untouched."""
    out = dict(streams)
    if "video" in streams:
        n_v = streams["video"].shape[0]
        out.update(dual_block_forward({"video": streams["video"]}, w, {"video": prefix}, temb_act,
                                      text_ctx, cos[:n_v], sin[:n_v], heads))
    return out


def task_hint(task: TaskMode, w) -> Tensor:
    e = nx.embedding(w["task.table"], [int(task)])
    return _lin(nx.silu(_lin(e, w, "task.fc1")), w, "task.fc2")  # (1, D)


def inject_task_hint(streams: dict[str, Tensor], task: TaskMode, w) -> dict[str, Tensor]:
    hint = task_hint(task, w)
    return {m: x + hint for m, x in streams.items()}


def split_motion_latent(m) -> tuple:
    m = m if isinstance(m, Tensor) else Tensor(np.asarray(m))
    f = m.shape[0]
    if m.ndim != 2 or m.shape[1] != MOTION_WIDTH:
        raise ValueError(f"motion latent must have shape (F, {MOTION_WIDTH}), got {m.shape}")
    return tuple(m[:, s].reshape(f, n, dd) for s, n, dd in zip(_GROUP_SLICES, GROUP_TOKENS, GROUP_DIMS))


def join_motion_groups(groups) -> np.ndarray:
    f = groups[0].shape[0]
    return np.concatenate([np.asarray(g).reshape(f, -1) for g in groups], axis=1)


# -- model ---------------------------------------------------------------------------


@dataclass
class DataStats:
    """Non-trainable buffers fitted to the training data.

    ``patch`` is the Gaussian fit of video patches, ``motion`` the per-slot
    normalization of motion parameters and ``motion_prior`` a Gaussian fit of
    normalized per-frame motion latents. Both Gaussians supply closed-form
    velocities that the network refines.
    """

    patch: PatchStats
    motion: MotionStats
    motion_prior: PatchStats

    @classmethod
    def identity(cls, patch_dim: int) -> "DataStats":
        return cls(PatchStats.identity(patch_dim), MotionStats(), PatchStats.identity(MOTION_WIDTH))


@dataclass
class ForwardOutput:
    video: Tensor | None
    motion: Tensor | None


class DualDiT:
    """Parameters plus non-trainable buffers (:class:`DataStats`)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, zero_init: bool = True, stats: DataStats | None = None):
        cfg.validate()
        self.cfg = cfg
        self.params = init_params(cfg, seed, zero_init)
        self.stats = stats or DataStats.identity(cfg.patch_dim)
        self.phase = Phase.UNTRAINED

    @property
    def patch_stats(self) -> PatchStats:
        return self.stats.patch

    @property
    def motion_stats(self) -> MotionStats:
        return self.stats.motion

    # convenience views
    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def branch_params(self, branch: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if branch_of(k) == branch}

    def block_prefix(self, i: int, modality: str) -> str:
        return f"blocks.{i}.shared" if self.cfg.share_modality_weights else f"blocks.{i}.{modality}"

    def copy_video_weights_to_motion(self) -> None:
        """Initialize the motion half of every dual block from the video half."""
        for name, p in self.params.items():
            if name.startswith("blocks.") and ".motion." in name:
                p.data[...] = self.params[name.replace(".motion.", ".video.")].data
        self.params["final.motion.ada.w"].data[...] = self.params["final.video.ada.w"].data
        self.params["final.motion.ada.b"].data[...] = self.params["final.video.ada.b"].data

    def text_context(self, text) -> Tensor:
        w = self.params
        if text is None:
            return w["text.null"]
        ids = np.asarray(text, dtype=np.int64)
        if ids.shape != (self.cfg.text_len,) or ids.min() < 0 or ids.max() >= self.cfg.text_vocab:
            raise ValueError(f"text ids must be {self.cfg.text_len} ids below {self.cfg.text_vocab}")
        return nx.embedding(w["text.table"], ids)

    def forward(self, video, motion, text, t: float, task: TaskMode,
                attn_store: list | None = None) -> ForwardOutput:
        """Velocity predictions for the modalities given.

        ``video`` is a ``(N_v, patch_dim)`` patch array, ``motion`` a normalized
        ``(F, 235)`` motion latent, ``text`` padded caption ids or ``None`` for
        the null condition. Either modality may be ``None`` (omitted from the
        sequence), but not both.
        """
        if video is None and motion is None:
            raise ValueError("model_forward needs at least one modality")
        cfg, w, dt = self.cfg, self.params, self.dtype
        t_lat, h_lat, w_lat = cfg.latent_grid
        streams: dict[str, Tensor] = {}
        if video is not None:
            video = np.asarray(video)
            if video.shape != (t_lat * h_lat * w_lat, cfg.patch_dim):
                raise ValueError(f"video latent shape {video.shape} != {(t_lat * h_lat * w_lat, cfg.patch_dim)}")
            streams["video"] = _lin(Tensor(video.astype(dt)), w, "video_in")
        frames = 0
        if motion is not None:
            groups = split_motion_latent(np.asarray(motion).astype(dt))
            frames = groups[0].shape[0]
            streams["motion"] = encode_groups(groups, w)

        temb = _lin(nx.silu(_lin(Tensor(timestep_embedding(t, cfg.dim).astype(dt)), w, "time.fc1")), w, "time.fc2")
        temb_act = nx.silu(temb)
        text_ctx = self.text_context(text)
        streams = inject_task_hint(streams, task, w)

        _, cos, sin = sequence_tables(t_lat, h_lat, w_lat, frames, TOKENS_PER_FRAME, cfg.rope,
                                      "video" in streams, "motion" in streams, dt)
        for i in range(cfg.layers):
            if i < cfg.video_only_layers:
                if "video" in streams:  # bypassed when the video branch is absent
                    streams = video_block_forward(streams, w, self.block_prefix(i, "video"), temb_act,
                                                  text_ctx, cos, sin, cfg.heads)
                continue
            prefixes = {m: self.block_prefix(i, m) for m in streams}
            local = [] if attn_store is not None else None
            streams = dual_block_forward(streams, w, prefixes, temb_act, text_ctx, cos, sin, cfg.heads, local)
            if attn_store is not None:
                attn_store.append({"layer": i, "probs": local[0],
                                   "n_video": streams["video"].shape[0] if "video" in streams else 0})

        out_v = out_m = None
        if "video" in streams:
            sh, sc = nx.split(_lin(temb_act, w, "final.video.ada"), [cfg.dim, cfg.dim])
            net = _lin(_modulate(streams["video"], sh, sc), w, "video_out")
            prior = self.patch_stats.velocity(video, t).astype(dt)
            out_v = net + Tensor(prior)
        if "motion" in streams:
            sh, sc = nx.split(_lin(temb_act, w, "final.motion.ada"), [cfg.dim, cfg.dim])
            dec = decode_groups(_modulate(streams["motion"], sh, sc), w)
            prior = self.stats.motion_prior.velocity(motion, t).astype(dt)
            out_m = nx.concat([g.reshape(frames, -1) for g in dec], axis=1) + Tensor(prior)
        return ForwardOutput(out_v, out_m)

    __call__ = forward


def model_forward(model: DualDiT, x_t, m_t, text, t: float, task: TaskMode):
    out = model.forward(x_t, m_t, text, t, task)
    return out.video, out.motion

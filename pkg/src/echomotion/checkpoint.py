"""Binary checkpoints: ``EMCK`` magic, version, JSON metadata, raw float32 payload.

Layout (all integers little-endian)::

    b"EMCK" | u32 version | u64 metadata length | metadata (UTF-8 JSON, sorted keys)
    | tensor payloads, float32 LE, in metadata order

The metadata carries the run config, training phase and step, the optimizer
hyperparameters and step count, and a table of ``{name, shape, offset}``
entries. Tensors cover model parameters, the patch/motion statistics buffers
(``buffer.*``: patch and motion-prior Gaussians, motion normalization) and Adam moments (``opt.m.*`` / ``opt.v.*``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import Phase, RunConfig
from .model import DataStats, DualDiT
from .motion import MotionStats
from .video import PatchStats

MAGIC = b"EMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    phase: int
    step: int
    tensors: dict[str, np.ndarray]
    optimizer: dict | None = None  # hyperparameters + step


_GROUPS = ("pos", "rot", "shape")


def _buffers(stats: DataStats) -> dict[str, np.ndarray]:
    out = {}
    for key, g in (("patch", stats.patch), ("motion_prior", stats.motion_prior)):
        out[f"buffer.{key}.mean"], out[f"buffer.{key}.basis"], out[f"buffer.{key}.var"] = g.mean, g.basis, g.var
    for i, name in enumerate(_GROUPS):
        out[f"buffer.motion.{name}.mean"] = stats.motion.mean[i]
        out[f"buffer.motion.{name}.std"] = stats.motion.std[i]
    return out


def _stats_from(tensors: dict) -> DataStats:
    f64 = lambda k: tensors[k].astype(np.float64)
    gauss = lambda key: PatchStats(f64(f"buffer.{key}.mean"), f64(f"buffer.{key}.basis"), f64(f"buffer.{key}.var"))
    motion = MotionStats(tuple(f64(f"buffer.motion.{n}.mean") for n in _GROUPS),
                         tuple(f64(f"buffer.motion.{n}.std") for n in _GROUPS))
    return DataStats(gauss("patch"), motion, gauss("motion_prior"))


def snapshot(cfg: RunConfig, model: DualDiT, phase: int, step: int, opt: nx.OptimizerState | None) -> Checkpoint:
    tensors = {k: v.data for k, v in model.params.items()}
    tensors.update(_buffers(model.stats))
    opt_meta = None
    if opt is not None:
        for k in sorted(opt.m):
            tensors[f"opt.m.{k}"] = opt.m[k]
            tensors[f"opt.v.{k}"] = opt.v[k]
        opt_meta = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                    "weight_decay": opt.weight_decay, "step": opt.step}
    return Checkpoint(cfg, int(phase), int(step), tensors, opt_meta)


def to_bytes(ck: Checkpoint) -> bytes:
    table, offset, payload = [], 0, []
    for name in sorted(ck.tensors):
        arr = np.ascontiguousarray(ck.tensors[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    meta = {"config": ck.config.to_dict(), "phase": ck.phase, "step": ck.step,
            "optimizer": ck.optimizer, "tensors": table}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob + b"".join(payload)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if 16 + n > len(data):
        raise CheckpointError("truncated checkpoint metadata")
    try:
        meta = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    base = 16 + n
    tensors, end = {}, base
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = base + entry["offset"]
        end = start + 4 * count
        if end > len(data):
            raise CheckpointError(f"truncated payload for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data[start:end], dtype="<f4").reshape(shape).astype(np.float32)
    if end != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(RunConfig.from_dict(meta["config"]), meta["phase"], meta["step"], tensors, meta["optimizer"])


def save(path, ck: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(data)


def build_model(ck: Checkpoint) -> DualDiT:
    """Reconstruct a model (parameters and buffers) from a checkpoint."""
    model = DualDiT(ck.config.model, seed=ck.config.seed)
    missing = set(model.params) - set(ck.tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in model.params.items():
        if p.shape != ck.tensors[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {ck.tensors[name].shape} vs {p.shape}")
        p.data = ck.tensors[name].astype(p.data.dtype).copy()
    try:
        model.stats = _stats_from(ck.tensors)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks buffer {exc}") from None
    model.phase = Phase(ck.phase)
    return model


def optimizer_state(ck: Checkpoint) -> nx.OptimizerState | None:
    if ck.optimizer is None:
        return None
    o = ck.optimizer
    st = nx.OptimizerState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                           weight_decay=o["weight_decay"], step=o["step"])
    for name, arr in ck.tensors.items():
        if name.startswith("opt.m."):
            st.m[name[6:]] = arr.copy()
        elif name.startswith("opt.v."):
            st.v[name[6:]] = arr.copy()
    return st

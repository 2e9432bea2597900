"""Configuration dataclasses and the flat ``key=value`` config file format.

Defaults are a toy-scale version of the 1.3B setting (dim 1536, 24 heads,
30 dual blocks, 81 frames at 480x832, AdamW lr 8e-6 / wd 0.001, shift 8,
50 sampling steps, guidance 6). The toy learning rate is 1e-4 because 8e-6
barely moves a model this small.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .rope import RopeConfig
from .toydata import MAX_CAPTION, VOCAB_SIZE
from .video import check_geometry, latent_shape, patch_dim


class ConfigError(ValueError):
    pass


class TaskMode(enum.IntEnum):
    JOINT = 0
    MOTION_TO_VIDEO = 1
    VIDEO_TO_MOTION = 2

    @classmethod
    def parse(cls, name: str) -> "TaskMode":
        aliases = {"joint": cls.JOINT, "m2v": cls.MOTION_TO_VIDEO, "v2m": cls.VIDEO_TO_MOTION}
        key = name.strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown task mode {name!r}") from None

    @property
    def short(self) -> str:
        return ("joint", "m2v", "v2m")[self]


class Phase(enum.IntEnum):
    UNTRAINED = 0
    MOTION_ONLY = 1
    MULTI_TASK = 2


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 4
    dual_layers: int = 4
    mlp_ratio: int = 4
    text_vocab: int = VOCAB_SIZE
    text_len: int = MAX_CAPTION
    stride: int = 4
    frames: int = 17
    height: int = 32
    width: int = 32
    fps: int = 16
    rope_theta: float = 10000.0
    collision_mode: bool = False
    share_modality_weights: bool = False

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(head_dim=self.head_dim, theta=self.rope_theta, collision_mode=self.collision_mode)

    @property
    def latent_grid(self) -> tuple[int, int, int]:
        return latent_shape(self.frames, self.height, self.width, self.stride)

    @property
    def patch_dim(self) -> int:
        return patch_dim(self.stride)

    @property
    def video_only_layers(self) -> int:
        return self.layers - self.dual_layers

    def validate(self) -> None:
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.head_dim % 8:
            raise ConfigError(f"head_dim {self.head_dim} must be divisible by 8 (even rotary sub-dimensions)")
        if not 0 <= self.dual_layers <= self.layers or self.layers < 1:
            raise ConfigError(f"need 0 <= dual_layers ({self.dual_layers}) <= layers ({self.layers}), layers >= 1")
        if self.dual_layers == 0:
            raise ConfigError("at least one dual-modality block is required to generate motion")
        if self.text_vocab < 2 or self.text_len < 1 or self.mlp_ratio < 1:
            raise ConfigError("text_vocab >= 2, text_len >= 1 and mlp_ratio >= 1 are required")
        if self.fps <= 0 or self.rope_theta <= 1:
            raise ConfigError("fps must be positive and rope_theta > 1")
        try:
            check_geometry(self.frames, self.height, self.width, self.stride)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class TrainPlan:
    phase1_steps: int = 1000
    phase2_steps: int = 2000
    paradigm_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    p_text: float = 0.1
    p_motion: float = 0.1
    p_video: float = 0.1
    shift: float = 8.0
    batch_size: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_motion: float = 1.0
    grad_clip: float = 0.0
    checkpoint_every: int = 500
    log_every: int = 1

    def validate(self) -> None:
        for name in ("p_text", "p_motion", "p_video"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        probs = tuple(float(p) for p in self.paradigm_probs)
        if len(probs) != 3 or any(p < 0 or p > 1 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"paradigm_probs must be three probabilities summing to 1, got {probs}")
        if self.shift < 1.0:
            raise ConfigError("shift must be >= 1")
        if self.batch_size < 1 or self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ConfigError("batch_size >= 1 and non-negative step counts are required")
        if self.lr <= 0 or self.weight_decay < 0 or self.grad_clip < 0 or self.lambda_motion < 0:
            raise ConfigError("lr > 0 and non-negative weight_decay, grad_clip, lambda_motion are required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam betas/eps")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")


@dataclass
class SampleSettings:
    sample_steps: int = 50
    sample_shift: float = 8.0
    omega1: float = 6.0
    omega2: float = 1.5

    def validate(self) -> None:
        if self.sample_steps < 1:
            raise ConfigError("sample_steps must be >= 1")
        if self.sample_shift < 1.0:
            raise ConfigError("sample_shift must be >= 1")
        if self.omega1 < 0 or self.omega2 < 0:
            raise ConfigError("guidance scales must be non-negative")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainPlan = field(default_factory=TrainPlan)
    sample: SampleSettings = field(default_factory=SampleSettings)
    seed: int = 0
    dataset: str = "data/toy.hmvd"
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.sample.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(model=ModelConfig(**d["model"]), train=TrainPlan(**{**d["train"], "paradigm_probs": tuple(d["train"]["paradigm_probs"])}),
                   sample=SampleSettings(**d["sample"]), seed=d["seed"], dataset=d["dataset"], out_dir=d["out_dir"])

    def digest(self, *, exclude=("out_dir",)) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


# -- key=value files -------------------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "train": TrainPlan, "sample": SampleSettings}
_TOP = ("seed", "dataset", "out_dir")


def _key_table() -> dict[str, tuple[str | None, type]]:
    table = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            table[f.name] = (section, f.type)
    for name in _TOP:
        table[name] = (None, {"seed": "int"}.get(name, "str"))
    return table


def _coerce(key: str, raw: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "tuple":
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r} (expected {typ})") from None


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Strict ``key=value`` parser; ``#`` starts a comment, unknown keys are errors."""
    cfg = base or RunConfig()
    table = _key_table()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        apply_override(cfg, key, raw, table)
    return cfg


def apply_override(cfg: RunConfig, key: str, raw: str, table=None) -> None:
    table = table or _key_table()
    if key not in table:
        raise ConfigError(f"unknown config key {key!r}")
    section, typ = table[key]
    value = _coerce(key, raw, typ)
    setattr(cfg if section is None else getattr(cfg, section), key, value)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text).validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        for f in fields(getattr(cfg, section)):
            val = getattr(getattr(cfg, section), f.name)
            if isinstance(val, tuple):
                val = ",".join(repr(float(x)) for x in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{f.name}={val}")
    for name in _TOP:
        lines.append(f"{name}={getattr(cfg, name)}")
    return "\n".join(lines) + "\n"

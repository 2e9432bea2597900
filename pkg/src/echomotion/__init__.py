"""Joint video and motion generation with a dual-modality diffusion transformer,
at toy scale on numpy."""

from .config import ModelConfig, Phase, RunConfig, SampleSettings, TaskMode, TrainPlan
from .model import DataStats, DualDiT
from .motion import MotionClip
from .sampling import SampleSpec, generate
from .training import Trainer
from .video import VideoClip

__all__ = [
    "DataStats",
    "DualDiT",
    "ModelConfig",
    "MotionClip",
    "Phase",
    "RunConfig",
    "SampleSettings",
    "SampleSpec",
    "TaskMode",
    "TrainPlan",
    "Trainer",
    "VideoClip",
    "generate",
]
__version__ = "0.1.0"

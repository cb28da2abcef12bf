"""Many-to-many multi-head attention with head-interaction convolutions, on a numpy autodiff engine."""

from .attention import AttnConfig, HeadMask, Placement, Variant, emha_forward
from .config import RunConfig, load_config
from .errors import (
    CheckpointFormatError,
    ConfigError,
    EmhaError,
    MetricError,
    NonFiniteError,
    NondeterminismError,
    ShapeError,
    TrainingDivergedError,
    UsageError,
)
from .model import ModelConfig, build, model_forward, param_count
from .tasks import TaskSpec
from .training import TrainConfig, analyze, evaluate, prune_sweep, train

__version__ = "0.1.0"

__all__ = [
    "AttnConfig", "HeadMask", "Placement", "Variant", "emha_forward",
    "RunConfig", "load_config",
    "CheckpointFormatError", "ConfigError", "EmhaError", "MetricError", "NonFiniteError",
    "NondeterminismError", "ShapeError", "TrainingDivergedError", "UsageError",
    "ModelConfig", "build", "model_forward", "param_count",
    "TaskSpec", "TrainConfig", "analyze", "evaluate", "prune_sweep", "train",
]

"""Video salient object detection with spatiotemporal knowledge distillation."""

from stkd.config import ArchitectureConfig, LossConfig, LossWeights, RunConfig, TrainConfig, load_config
from stkd.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericalError,
    ShapeError,
    StkdError,
)
from stkd.model import STKDNet

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "LossConfig",
    "LossWeights",
    "NumericalError",
    "RunConfig",
    "STKDNet",
    "ShapeError",
    "StkdError",
    "TrainConfig",
    "load_config",
]

"""Early-exit temporal U-Net for EEG artifact segmentation, built on a small
numpy reverse-mode autodiff engine."""

from .autodiff import Tensor, backward
from .errors import (CheckpointError, ConfigError, DataError, ExitSegError, ShapeError, TrainingError,
                     VerificationError)
from .model import EARLY_EXIT, MCDROP, VANILLA, ModelConfig, build_model, forward

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "ModelConfig", "build_model", "forward", "EARLY_EXIT", "MCDROP", "VANILLA",
    "ExitSegError", "ShapeError", "ConfigError", "DataError", "CheckpointError", "TrainingError",
    "VerificationError",
]

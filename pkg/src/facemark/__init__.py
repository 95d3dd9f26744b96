"""Cascaded deformable-attention facial landmark detector, numpy only.

The model reads an image through a small strided CNN, flattens the
resulting pyramid into a memory matrix, and refines landmark coordinates
through a stack of decoder layers that attend to a handful of predicted
sampling locations per query.  Training, gradient verification, synthetic
data, metrics, and a batch CLI live in the submodules.
"""

from .decoder import DecoderState, ModelConfig, TINY, forward, backward
from .errors import ConfigError, NumericError
from .training import (
    SyntheticFaceSpec,
    TrainConfig,
    gen_synthetic,
    grad_check,
    landmark_loss,
    self_train,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DecoderState",
    "ModelConfig",
    "NumericError",
    "SyntheticFaceSpec",
    "TINY",
    "TrainConfig",
    "backward",
    "forward",
    "gen_synthetic",
    "grad_check",
    "landmark_loss",
    "self_train",
    "train",
    "__version__",
]

"""Phrase grounding by attention over box proposals, trained with or
without box supervision via phrase reconstruction."""

from .errors import (
    ConfigError,
    ConstraintError,
    DataError,
    DimensionError,
    DivergenceError,
    NumericError,
    PhrasegroundError,
)
from .model import ModelConfig, ModelParams, full_forward, ground_phrase, run_batch
from .optim import TrainConfig, default_att_loss_weight, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConstraintError",
    "DataError",
    "DimensionError",
    "DivergenceError",
    "NumericError",
    "PhrasegroundError",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "default_att_loss_weight",
    "full_forward",
    "ground_phrase",
    "run_batch",
    "train",
    "__version__",
]

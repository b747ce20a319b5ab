"""Predictive-coding video frame prediction with learnable anti-aliasing filters."""

from .errors import (
    ConfigError,
    DegenerateFilterError,
    FormatError,
    NumericError,
    PCPredictError,
    ShapeError,
    StateError,
    TruncatedFileError,
)
from .network import NetworkConfig, PCNetwork
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateFilterError",
    "FormatError",
    "NetworkConfig",
    "NumericError",
    "PCNetwork",
    "PCPredictError",
    "ShapeError",
    "StateError",
    "TrainConfig",
    "TruncatedFileError",
    "train",
]

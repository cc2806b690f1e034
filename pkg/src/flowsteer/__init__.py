"""Rectified-flow Euler sampling with early-step trajectory correction, at desk scale."""
from .sampler import CorrectorConfig, TimeGrid, sample
from .velocity import AffineField, ConstantField, MLPField, Prompt, TrainConfig, train_flow_matching

__version__ = "0.1.0"

__all__ = [
    "AffineField",
    "ConstantField",
    "CorrectorConfig",
    "MLPField",
    "Prompt",
    "TimeGrid",
    "TrainConfig",
    "sample",
    "train_flow_matching",
]

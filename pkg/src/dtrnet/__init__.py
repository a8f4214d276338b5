"""Dynamic token routing between full attention and a linear V·O path, on numpy."""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    DTRNetError,
    NonFiniteLossError,
    SequenceLengthError,
    UnsupportedModeError,
)
from .model import Model, ModelConfig, build_model, expand_pattern, forward, forward_batch, generate
from .objective import TrainConfig, evaluate, routing_penalty, train
from .routing import RoutingConfig

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DTRNetError",
    "DimensionError",
    "Model",
    "ModelConfig",
    "NonFiniteLossError",
    "RoutingConfig",
    "SequenceLengthError",
    "TrainConfig",
    "UnsupportedModeError",
    "build_model",
    "evaluate",
    "expand_pattern",
    "forward",
    "forward_batch",
    "generate",
    "routing_penalty",
    "train",
]

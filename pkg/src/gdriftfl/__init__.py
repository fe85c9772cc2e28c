"""Federated learning simulator for group-specific distributed concept drift."""

from .data import build_schedule, build_stream, generate_synthetic, load_idx
from .errors import (
    CapacityError,
    ConfigurationError,
    EmptyInputError,
    EngineError,
    IDXParseError,
    NumericError,
    ShapeError,
    SimulatorError,
)
from .federation import AlgorithmKind, FederationConfig, run_federation
from .model import Architecture, ModelParams, TrainConfig, init_params, local_train

__version__ = "0.1.0"

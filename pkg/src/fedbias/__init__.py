"""Federated learning simulator with personalized representation bias and mean regularization."""

from .errors import ConfigError, DataError, FedBiasError, NumericError, ParseError, ShapeError, StateError
from .federation import FederationConfig, run_federation

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FedBiasError",
    "FederationConfig",
    "NumericError",
    "ParseError",
    "ShapeError",
    "StateError",
    "run_federation",
]

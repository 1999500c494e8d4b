"""Exception types raised across the package."""


class FedBiasError(Exception):
    """Base class for all package errors."""


class ConfigError(FedBiasError, ValueError):
    """Invalid hyperparameter or configuration value.

    ``key`` names the offending setting when one is known.
    """

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ShapeError(FedBiasError, ValueError):
    """Array dimensions do not line up."""


class NumericError(FedBiasError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DataError(FedBiasError, ValueError):
    """Dataset is empty, too small, or otherwise unusable."""


class ParseError(DataError):
    """Malformed input file. ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class StateError(FedBiasError, RuntimeError):
    """Operation called on an object in the wrong state."""

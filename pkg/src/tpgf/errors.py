"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration value or violated precondition."""


class DimensionError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class DataFormatError(ValueError):
    """Malformed dataset, checkpoint, or config file."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values.

    Carries the best parameters and curves seen so far, so callers can
    retain the last usable checkpoint.
    """

    def __init__(self, message, params=None, curves=None):
        super().__init__(message)
        self.params = params
        self.curves = curves

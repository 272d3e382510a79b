"""Exception types shared across the package.

The CLI maps each family onto a process exit code.
"""


class LMFNetError(Exception):
    exit_code = 1


class ConfigError(LMFNetError, ValueError):
    """Invalid configuration (bad hyperparameters, unknown names)."""

    exit_code = 2


class DimensionError(ConfigError):
    """Tensor shapes that cannot be combined."""


class DataError(LMFNetError):
    """Missing, malformed or inconsistent data on disk or in memory."""

    exit_code = 3


class NumericError(LMFNetError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = 4

"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numeric 4).
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ConfigError(ValueError):
    """An experiment or model configuration is invalid."""


class DataError(ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss and was aborted."""

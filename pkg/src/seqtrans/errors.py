"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class SeqTransError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SeqTransError):
    """Invalid configuration, usage, or incompatible shapes/dimensions."""


class ShapeError(ConfigError):
    """Operand shapes invalid for a primitive; message carries both shapes."""


class DataError(SeqTransError):
    """Malformed or missing data files."""


class NumericError(SeqTransError):
    """Non-finite values or numeric divergence where finiteness is required."""

"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class ConfigError(Exception):
    """Invalid or unknown configuration (fail-closed validation)."""


class DataError(Exception):
    """Missing, unreadable, or malformed input data."""


class NumericError(Exception):
    """Non-finite values or numerically impossible state during training."""

"""Exception types shared across the package.

The CLI maps these onto exit codes (config 2, data 3, numeric 4).
"""


class AgadaptError(Exception):
    """Base class for all package errors."""


class ConfigError(AgadaptError):
    """Invalid configuration value or malformed config file."""


class DataError(AgadaptError):
    """Missing, inconsistent, or malformed data (corpora, checkpoints, selections)."""


class NumericError(AgadaptError):
    """Numerical failure: degenerate attention rows, non-finite values, failed training gates."""

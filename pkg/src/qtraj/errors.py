"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class QtrajError(Exception):
    """Base class for all package errors."""


class ConfigError(QtrajError):
    """Invalid configuration: bad values, unknown keys, inconsistent options."""


class DataError(QtrajError):
    """I/O and file-format problems: bad magic, truncation, checksum mismatch."""


class NumericError(QtrajError):
    """Numerical failure: divergence, non-finite values, unstable step size."""

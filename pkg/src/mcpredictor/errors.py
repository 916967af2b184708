"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1 (usage),
DataError -> 2 (bad corpus/vocabulary/checkpoint content),
NumericError -> 3 (non-finite loss, failed gradient check).
"""


class ConfigError(Exception):
    """Bad flags, unknown config keys, invalid option values."""


class DataError(Exception):
    """Malformed or inconsistent input data."""


class NumericError(Exception):
    """Numerical failure: divergence, non-finite values, gradient mismatch."""

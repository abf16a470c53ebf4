"""Error types shared across the package.

Each class maps to one CLI exit code so failures stay diagnosable
from shell scripts without parsing stderr.
"""


class AutoregError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(AutoregError):
    """Invalid configuration value or malformed config file."""

    exit_code = 2


class DataError(AutoregError):
    """Missing, unreadable, or structurally invalid input data."""

    exit_code = 3


class NumericalError(AutoregError):
    """Non-finite values or other numerical breakdown during a run."""

    exit_code = 4


class ConvergenceError(AutoregError):
    """Search ended without meeting its stability test (strict mode only)."""

    exit_code = 5


class ContractError(AutoregError):
    """Arguments violate a documented function contract."""

    exit_code = 1


class FormatError(DataError):
    """Byte-level container violation (bad magic, truncation, bad dtype tag)."""

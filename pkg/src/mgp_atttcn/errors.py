"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config/usage problems -> 1,
data problems -> 2, numerical failures -> 3.
"""


class MgpAttTcnError(Exception):
    """Base class for all package errors."""


class InputError(MgpAttTcnError, ValueError):
    """Invalid argument values or shapes passed to an operation."""


class ConfigError(MgpAttTcnError, ValueError):
    """Malformed or inconsistent run configuration."""


class DataError(MgpAttTcnError):
    """Dataset files or records that violate the documented schema."""


class NumericalError(MgpAttTcnError):
    """Numerical failure (factorization breakdown, non-finite loss)."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        # Optional dict with parameter values at the point of failure,
        # kept so callers can dump a debug checkpoint.
        self.snapshot = snapshot


class UndefinedMetricError(InputError):
    """Metric requested on inputs where it is undefined (single class)."""

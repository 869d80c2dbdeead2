"""Exception hierarchy shared across the package.

Each error class carries the process exit code the command line tool maps
it to, so library failures translate to stable shell semantics.
"""


class DeconfoundError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(DeconfoundError):
    """Invalid configuration or parameter domain (exit code 1)."""

    exit_code = 1


class DataError(DeconfoundError):
    """Malformed or inconsistent input data (exit code 2)."""

    exit_code = 2


class NumericalError(DeconfoundError):
    """Numerical failure inside a sampler or solver (exit code 3)."""

    exit_code = 3


class GateError(DeconfoundError):
    """Predictive-check gate refused a downstream stage (exit code 4)."""

    exit_code = 4

"""Exception types shared across the package.

The harness maps each family to a process exit code (see ``labeldist.cli``).
"""


class LabelDistError(Exception):
    """Base class for all package errors."""


class ConfigError(LabelDistError, ValueError):
    """Invalid experiment or architecture configuration."""


class DataError(LabelDistError, ValueError):
    """Malformed, insufficient or inconsistent data."""


class ArchMismatchError(DataError):
    """A parameter vector, record or meta file belongs to a different architecture."""


class NumericError(LabelDistError, ArithmeticError):
    """Non-finite values appeared during a forward or backward pass."""

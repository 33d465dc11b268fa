"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config/input problems exit 1,
runtime aborts exit 2.
"""


class VideditError(Exception):
    """Base class for all package errors."""


class ShapeError(VideditError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(VideditError, ValueError):
    """Input values outside the mathematical domain of an operation."""


class UsageError(VideditError, RuntimeError):
    """An API was called in a way its contract forbids."""


class InputError(VideditError, ValueError):
    """User-supplied data (instruction, video, file) is invalid."""


class ConfigError(VideditError, ValueError):
    """A configuration value or combination is invalid."""


class FormatError(VideditError, ValueError):
    """An on-disk artifact is malformed, truncated, or corrupted."""


class TrainingAbort(VideditError, RuntimeError):
    """Training hit a non-recoverable state (e.g. NaN loss)."""

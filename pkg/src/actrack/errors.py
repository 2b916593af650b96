"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes, so each failure class gets its own type.
"""


class ACTrackError(Exception):
    """Base class for all package errors."""


class DimensionError(ACTrackError, ValueError):
    """Operand shapes do not agree."""


class ConfigurationError(ACTrackError, ValueError):
    """A structural or hyper-parameter setting is invalid."""


class StateError(ACTrackError, RuntimeError):
    """An object was used in the wrong lifecycle state."""


class DomainError(ACTrackError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ArgumentError(ACTrackError, ValueError):
    """A caller-supplied argument violates a precondition."""


class FormatError(ACTrackError, ValueError):
    """A file on disk is malformed."""


class NumericalError(ACTrackError, FloatingPointError):
    """NaN or Inf appeared where finite values are required."""

"""Exception hierarchy shared by every fetrack module."""


class FETrackError(Exception):
    """Base class for all library errors."""


class ShapeError(FETrackError, ValueError):
    """Array extents are inconsistent with an operation."""


class ParameterError(FETrackError, ValueError):
    """A hyper-parameter or operator argument is out of its valid range."""


class NumericError(FETrackError, ArithmeticError):
    """A non-finite value was fed to or produced by a primitive."""


class InputError(FETrackError, ValueError):
    """Malformed user data: events, boxes, labels, files."""


class ConfigError(FETrackError, ValueError):
    """A configuration invariant is violated.

    ``field`` names the offending configuration key.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field

"""Exception hierarchy shared by every stage."""


class FacelightError(Exception):
    """Base class for all errors raised by facelight."""


class InputError(FacelightError, ValueError):
    """An input file is missing, unreadable or malformed."""


class ValidationError(FacelightError, ValueError):
    """A precondition on the data does not hold."""


class EmptyMaskError(ValidationError):
    """The derived skin region contains no pixels."""


class InvariantError(FacelightError, AssertionError):
    """An internal invariant was violated; indicates a bug."""

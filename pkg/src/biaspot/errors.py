"""Exception and warning types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class NumericError(FloatingPointError):
    """Raised when a computation produces non-finite values."""


class DegenerateWeightsWarning(RuntimeWarning):
    """Importance weights collapsed onto fewer than two effective samples."""

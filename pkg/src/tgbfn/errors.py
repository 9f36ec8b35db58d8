class InvalidArgument(ValueError):
    """Raised when an argument violates an operation's precondition."""


class NumericalFailure(ArithmeticError):
    """Raised when a computation produces NaN/Inf or underflows completely."""

"""Exception types shared across modules."""


class DataError(ValueError):
    """Malformed, missing, or inconsistent input data."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite or otherwise degenerate values."""

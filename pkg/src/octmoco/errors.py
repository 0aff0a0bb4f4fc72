"""Exception types shared across the package."""


class DataError(Exception):
    """Input files or arrays are malformed, inconsistent, or missing."""


class NumericalError(Exception):
    """A computation produced non-finite values or is undefined."""

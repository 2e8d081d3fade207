"""Exception hierarchy shared by every module."""


class AlphaVIError(Exception):
    """Base class for all errors raised by :mod:`alphavi`."""


class NotPositiveDefinite(AlphaVIError, ValueError):
    pass


class NotSymmetric(AlphaVIError, ValueError):
    pass


class NotSquare(AlphaVIError, ValueError):
    pass


class DimensionMismatch(AlphaVIError, ValueError):
    pass


class RegimeUnsupported(AlphaVIError, ValueError):
    """The estimator has no form for the requested alpha regime."""


class NonFinite(AlphaVIError, FloatingPointError):
    """A ratio power or gradient left the representable range.

    ``count`` is the number of offending samples when known.
    """

    def __init__(self, message, count=None):
        super().__init__(message)
        self.count = count


class ExistenceViolated(AlphaVIError, ValueError):
    """``1 + 2 alpha (lambda - 1) <= 0``: the quantity has no finite moments."""


class DegenerateAllZero(AlphaVIError, ValueError):
    """Every Monte Carlo sample was the zero vector."""


class ParseError(AlphaVIError, ValueError):
    def __init__(self, row, col, message=""):
        super().__init__(f"row {row}, column {col}: {message}".rstrip(": "))
        self.row = row
        self.col = col


class MissingClass(AlphaVIError, ValueError):
    pass


class ConfigError(AlphaVIError, ValueError):
    pass

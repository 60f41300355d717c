"""Exception types raised across the package."""

from sklearn.exceptions import NotFittedError


class ShapeError(ValueError):
    """Array dimensions do not compose."""


class NumericError(ArithmeticError):
    """A non-finite value reached a numerical routine."""


class InvalidArchitectureError(ValueError):
    pass


class InvalidLabelError(ValueError):
    pass


class DataError(ValueError):
    """Input data is malformed, misaligned, or degenerate."""


class ConfigError(ValueError):
    pass


class FitError(ValueError):
    """An encoder or model could not be fitted on the given data."""


class SplitError(DataError):
    """Too few sessions to cut train/validation/test."""


class ResampleError(DataError):
    pass


class ParseError(DataError):
    """Too many malformed lines in a click log."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or []


__all__ = [
    "ConfigError",
    "DataError",
    "FitError",
    "InvalidArchitectureError",
    "InvalidLabelError",
    "NotFittedError",
    "NumericError",
    "ParseError",
    "ResampleError",
    "SplitError",
    "ShapeError",
]

"""Exception types shared across the package.

The CLI maps these onto exit codes (3 for data problems, 4 for numeric
failures); everything else that is a plain programming error stays a
ValueError.
"""


class DataError(Exception):
    """Malformed, missing or unusable input data."""


class AudioTooShortError(DataError):
    pass


class FormatError(DataError):
    """A binary file (features or checkpoint) failed validation."""


class CtcInfeasibleError(ValueError):
    """No CTC alignment of the labels fits in the available frames."""


class NumericError(ArithmeticError):
    """NaN or inf appeared where a finite value is required."""

"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration problems exit 2, bad
input data exits 3 and numerical failures exit 4.
"""


class SigsleuthError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SigsleuthError, ValueError):
    """Invalid parameters, split sizes or option combinations."""

    exit_code = 2


class DataError(SigsleuthError, ValueError):
    """Input data that violates a table or model contract."""

    exit_code = 3


class SchemaError(DataError):
    """A required column is missing or duplicated."""


class ParseError(DataError):
    """A cell could not be parsed as a finite real."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class NumericalError(SigsleuthError, ArithmeticError):
    """An algorithm failed to produce a usable number."""

    exit_code = 4


class FitError(NumericalError):
    """Iterative fit did not converge."""


class InconclusiveTestError(NumericalError):
    """The null distribution is degenerate so no p-value can be formed."""

"""Exception hierarchy shared by the library and the command-line front end."""

from __future__ import annotations


class AdfError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ValidationError(AdfError, ValueError):
    """Bad input: malformed data, out-of-range parameters, unknown names."""

    exit_code = 2


class DomainError(ValidationError):
    """A function was evaluated where it is undefined (e.g. score where f = 0)."""


class NumericalError(AdfError, ArithmeticError):
    """A numerical procedure could not deliver a trustworthy answer."""

    exit_code = 3


class SingularityError(NumericalError):
    """A Gram matrix became (numerically) singular.

    ``where`` carries the offending time/coordinate values so callers can report
    which residuals or sets pushed the computation past the guard.
    """

    def __init__(self, message: str, where=None):
        super().__init__(message)
        self.where = where


class ConvergenceError(NumericalError):
    def __init__(self, message: str, last_iterate=None, iterations: int = 0):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class DegenerateError(NumericalError):
    """Degenerate scale or projection weights (all-zero residuals, 1_perp = 0)."""


class DegenerateScaleError(DegenerateError):
    pass


class DegenerateWeightError(DegenerateError):
    pass

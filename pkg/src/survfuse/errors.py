"""Exception hierarchy.

Every error raised by the package derives from :class:`SurvfuseError` so that
the command line front end can map failures onto exit codes: input problems
(:class:`InvalidInputError` and subclasses) exit with 2, numerical failures
(:class:`NumericalError` and subclasses) with 3.
"""


class SurvfuseError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SurvfuseError, ValueError):
    """Arguments or records violate a documented precondition."""


class LoadError(InvalidInputError):
    """A data file could not be parsed into a valid dataset."""


class NumericalError(SurvfuseError, ArithmeticError):
    """A numerical routine failed."""


class DegenerateFitError(NumericalError):
    """The model cannot be fitted, e.g. there are no events."""


class ConvergenceError(NumericalError):
    """An iterative solver did not reach its tolerance."""

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class SingularMatrixError(NumericalError):
    """A matrix that must be nonsingular (or positive definite) is not."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class SeparationError(NumericalError):
    """Logistic regression coefficients diverge (complete separation)."""


class StageError(SurvfuseError):
    """Wraps an error raised inside one stage of a fitting pipeline.

    The original exception is kept as ``__cause__`` and as :attr:`error`.
    """

    def __init__(self, stage, error):
        super().__init__(f"[{stage}] {error}")
        self.stage = stage
        self.error = error

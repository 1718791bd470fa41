"""Exception hierarchy shared by the toolkit.

The CLI maps :class:`DataError` to exit code 3 and :class:`NumericalError`
to exit code 4; anything else that is a plain ``ValueError`` is treated as
a usage problem (exit code 2).
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class DataError(ToolkitError, ValueError):
    """Input data is unreadable, mistyped or inconsistent with the schema."""


class NumericalError(ToolkitError, ArithmeticError):
    """A numerical procedure could not produce a trustworthy answer."""


class RankDeficiencyError(NumericalError):
    """The design matrix does not have full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap before certifying optimality."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class DensityEstimationError(NumericalError):
    """The residual spread is degenerate so no density estimate exists."""


class RelevanceError(NumericalError):
    """The instrument has no first-stage effect on treatment take-up."""

    def __init__(self, message, first_stage=0.0):
        super().__init__(message)
        self.first_stage = first_stage


class ResamplingError(NumericalError):
    """Too many bootstrap replications failed."""

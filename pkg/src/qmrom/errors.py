"""Exception types shared across the toolkit."""

from __future__ import annotations


class QmromError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(QmromError):
    """Arguments violate a documented precondition."""


class NumericalFailureError(QmromError):
    """An iterative kernel exhausted its iteration budget.

    The best iterate found so far, if any, is attached as ``best``.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class SingularMatrixError(QmromError):
    """Linear system is singular to working precision.

    ``pivot_index`` is the index of the first vanishing pivot.
    """

    def __init__(self, message: str, pivot_index: int):
        super().__init__(message)
        self.pivot_index = pivot_index


class FormatError(QmromError):
    """A binary or text artifact does not match its declared format.

    ``offset`` is the byte offset at which the problem was detected,
    when it is known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(QmromError):
    """Configuration file is missing, malformed, or out of range."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class ConstitutiveFailureError(QmromError):
    """The local material return mapping did not converge."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StepFailureError(QmromError):
    """A global Newton step did not converge within its iteration cap."""

    def __init__(self, message: str, residual_norm: float | None = None):
        super().__init__(message)
        self.residual_norm = residual_norm


class ReducedSolverError(QmromError):
    """The reduced linearized system could not be solved."""


class RegularizationRequiredError(QmromError):
    """The feature Gram matrix is singular; a positive gamma is required."""


class TrainingDataError(QmromError):
    """ECSW training data could not be assembled (e.g. encoder failure)."""


class EcswTrainingError(QmromError):
    """Sparse NNLS training failed; partial weights attached when available."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial

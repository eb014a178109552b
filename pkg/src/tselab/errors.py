"""Exception hierarchy shared by every module."""

from __future__ import annotations


class TselabError(Exception):
    """Base class for all errors raised by tselab."""


class ShapeError(TselabError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(TselabError, ValueError):
    """An input violates a documented precondition (e.g. not row-stochastic)."""


class UndefinedMeasureError(TselabError, ValueError):
    """A measure is undefined for the given input (zero matrix, zero row)."""


class BoundaryError(TselabError, ValueError):
    """A ratio is undefined because a projector component vanishes."""

    def __init__(self, message: str, projector: str | None = None):
        super().__init__(message)
        self.projector = projector


class AttentionOverflowError(TselabError, ArithmeticError):
    """Attention logits are not finite."""


class ConvergenceError(TselabError, ArithmeticError):
    """An iterative method exhausted its budget.

    ``last`` holds the final iterate (a vector, matrix or scalar estimate).
    """

    def __init__(self, message: str, last=None, iterations: int | None = None):
        super().__init__(message)
        self.last = last
        self.iterations = iterations

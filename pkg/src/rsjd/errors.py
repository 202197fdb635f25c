"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class RSJDError(Exception):
    """Base class for every error raised by the package."""


class DimensionMismatch(RSJDError, ValueError):
    pass


class DomainError(RSJDError, ValueError):
    """An allocation lies outside the admissible set for some jump mark."""


class OptFailure(RSJDError, RuntimeError):
    pass


class RankError(RSJDError, ValueError):
    pass


class NotZeroBeta(RSJDError, ValueError):
    """The minimum-norm zero-beta allocation had to be rescaled to fit the admissible set."""


class LinearSolveFailure(RSJDError, RuntimeError):
    pass


class NonPositiveValue(RSJDError, RuntimeError):
    pass


class NoConvergence(RSJDError, RuntimeError):
    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class PolicyInfeasible(RSJDError, RuntimeError):
    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


class PreconditionError(RSJDError, ValueError):
    pass


class NonPSD(RSJDError, RuntimeError):
    pass


class ConfigError(RSJDError, ValueError):
    pass

"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ActorSimulatorError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ActorSimulatorError, ValueError):
    pass


class InvalidStateError(ActorSimulatorError, ValueError):
    pass


class DivergedSimulationError(ActorSimulatorError, FloatingPointError):
    """A simulated state became non-finite.

    ``step`` is the rollout step (or Euler substep) and ``index`` the
    offending state component, when known.
    """

    def __init__(self, message, step=None, index=None):
        super().__init__(message)
        self.step = step
        self.index = index


class DivergedModelError(DivergedSimulationError):
    """The mean function or its derivatives produced non-finite values."""


class FitFailedError(ActorSimulatorError, RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class IllConditionedError(ActorSimulatorError, ArithmeticError):
    def __init__(self, message, condition_number=float("nan")):
        super().__init__(message)
        self.condition_number = condition_number


class SelectionFailedError(ActorSimulatorError, RuntimeError):
    pass


class TrainingDivergedError(ActorSimulatorError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ActorSimulatorError, ValueError):
    pass


class RunFailedError(ActorSimulatorError, RuntimeError):
    pass

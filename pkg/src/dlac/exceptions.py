"""Exception hierarchy shared by the simulator, trainer and CLI."""


class DLACError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DLACError, ValueError):
    """Invalid or missing configuration (parameters, grids, unfitted objects)."""


class EvaluationError(DLACError, ArithmeticError):
    """The process right-hand side cannot be evaluated at the given point."""


class IntegrationError(DLACError, ArithmeticError):
    """A Runge-Kutta stage produced a non-finite state."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class SolverError(DLACError, RuntimeError):
    """Steady-state solve did not converge; carries the best residual found."""

    def __init__(self, message, best_state=None, best_residual=float("inf")):
        super().__init__(message)
        self.best_state = best_state
        self.best_residual = best_residual


class SynchronizationError(DLACError, RuntimeError):
    """A message-exchange round was read before every controller published."""


class BufferUnderflowError(DLACError, RuntimeError):
    """A replay buffer holds fewer transitions than one batch."""


class DiagnosticError(DLACError, ValueError):
    """A diagnostic statistic is undefined for the supplied data."""

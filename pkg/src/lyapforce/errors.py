"""Exception hierarchy shared by all modules."""


class LyapForceError(Exception):
    """Base class for toolkit errors."""


class ConfigError(LyapForceError, ValueError):
    """Invalid configuration or parameter values."""


class ShapeError(LyapForceError, ValueError):
    """Array dimensions do not match the model or each other."""


class DataError(LyapForceError, ValueError):
    """Input data unusable for the requested computation (too short, empty)."""


class DegenerateDataError(DataError):
    """Data without usable variation, e.g. a constant column."""


class SingularMatrixError(LyapForceError, ArithmeticError):
    """A linear system could not be solved stably."""


class DivergenceError(LyapForceError, ArithmeticError):
    """A numerical rollout produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IntegrationDivergedError(DivergenceError):
    """ODE/DDE integration produced non-finite state."""


class TrainingDivergedError(DivergenceError):
    """Training hit a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message, step=None, model=None, readout=None, history=None):
        super().__init__(message, step=step)
        self.model = model
        self.readout = readout
        self.history = history if history is not None else []


class NoPositiveExponentError(LyapForceError, ValueError):
    """Maximal Lyapunov exponent is not positive; predictability time undefined."""


class UsageError(LyapForceError, TypeError):
    """An operation was called with an unsupported model type."""

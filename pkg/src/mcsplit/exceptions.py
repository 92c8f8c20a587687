"""Exception types raised by mcsplit."""
from sklearn.exceptions import NotFittedError as _SkNotFitted


class ConfigurationError(ValueError):
    """Invalid sizes, options or configuration values."""


class ContinuumError(ValueError):
    """A continuum definition is inadmissible for the mesh it is used on."""


class SolverError(RuntimeError):
    """A linear solve or eigen-solve failed to meet its accuracy contract."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotFittedError(_SkNotFitted):
    """Estimator used before ``fit`` was called."""

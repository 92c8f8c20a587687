"""Multicontinuum homogenization and partially explicit splitting schemes."""

__version__ = "0.1.0"

from .estimator import MulticontinuumHomogenizer  # noqa: E402
from .exceptions import ConfigurationError, ContinuumError, NotFittedError, SolverError  # noqa: E402

__all__ = [
    "MulticontinuumHomogenizer",
    "ConfigurationError",
    "ContinuumError",
    "NotFittedError",
    "SolverError",
    "__version__",
]

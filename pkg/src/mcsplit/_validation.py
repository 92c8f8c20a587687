"""Input checks shared by the estimator facade."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigurationError, NotFittedError
from .media import CoefficientField


def check_field(X) -> CoefficientField:
    """Square raster of strictly positive conductivities."""
    if isinstance(X, CoefficientField):
        return X
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    if X.shape[0] != X.shape[1]:
        raise ConfigurationError(f"field raster must be square, got shape {X.shape}")
    if np.any(X <= 0):
        raise ConfigurationError("field values must be strictly positive")
    return CoefficientField(X)


def check_coarse_n(coarse_n, fine_n: int) -> int:
    if not isinstance(coarse_n, numbers.Integral) or coarse_n < 1:
        raise ConfigurationError(f"coarse_n must be a positive integer, got {coarse_n!r}")
    if fine_n % coarse_n:
        raise ConfigurationError(f"coarse_n={coarse_n} does not divide the raster size {fine_n}")
    return int(coarse_n)


def check_positive(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ConfigurationError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_weights(weights, n_cells: int) -> np.ndarray:
    """Continuum weights ``(N, n_cells)``."""
    W = check_array(weights, dtype=np.float64, ensure_2d=True)
    if W.shape[1] != n_cells:
        raise ConfigurationError(f"continuum weights have {W.shape[1]} cells, expected {n_cells}")
    return W


def check_nodal(u, n_nodes: int) -> np.ndarray:
    """Fine nodal vectors as a 2-D ``(n_samples, n_nodes)`` array."""
    U = np.asarray(u, dtype=float)
    if U.ndim == 1:
        U = U[None, :]
    U = check_array(U, dtype=np.float64)
    if U.shape[1] != n_nodes:
        raise ConfigurationError(f"nodal vectors have {U.shape[1]} entries, expected {n_nodes}")
    return U


def check_fitted(est, attrs=("plan_",)):
    missing = [a for a in attrs if not hasattr(est, a)]
    if missing:
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call 'fit' first")

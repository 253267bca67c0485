"""Input validation helpers shared by the estimators and the functional API."""

import numbers

import numpy as np
from sklearn.utils import check_array

from .errors import ConfigurationError, InputValidationError


def as_distances(X, name="X"):
    """Return a 1-D float64 array from a vector or a single-column matrix."""
    try:
        arr = check_array(X, ensure_2d=False, dtype=np.float64,
                          input_name=name)
    except ValueError as exc:
        raise InputValidationError(str(exc)) from exc
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise InputValidationError(
                f"{name} must hold a single distance column, got shape {arr.shape}")
        arr = arr[:, 0]
    if np.any(arr < 0):
        raise InputValidationError(f"{name} contains negative distances")
    return np.ascontiguousarray(arr)


def as_outcomes(y, n=None, name="y"):
    try:
        arr = check_array(y, ensure_2d=False, dtype=np.float64,
                          input_name=name)
    except ValueError as exc:
        raise InputValidationError(str(exc)) from exc
    if arr.ndim != 1:
        arr = arr.ravel()
    if n is not None and arr.shape[0] != n:
        raise InputValidationError(
            f"{name} has length {arr.shape[0]}, expected {n}")
    return np.ascontiguousarray(arr)


def check_epsilon(epsilon):
    if not isinstance(epsilon, numbers.Real) or not 0.0 < epsilon < 1.0:
        raise ConfigurationError(f"epsilon must lie in (0, 1), got {epsilon!r}")
    return float(epsilon)


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ConfigurationError(f"{name} must be a positive number, got {value!r}")
    return float(value)


def check_grid(grid):
    """Validate an explicit evaluation grid (strictly increasing, finite)."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ConfigurationError("grid must be a non-empty 1-D array")
    if not np.all(np.isfinite(g)):
        raise ConfigurationError("grid contains non-finite values")
    if g.size > 1 and np.any(np.diff(g) <= 0):
        raise ConfigurationError("grid must be strictly increasing")
    return g


def make_grid(d_min, d_max, n_points):
    """Evenly spaced grid, e.g. ``make_grid(0, 100, 101)`` for 1 km steps."""
    if n_points < 1 or int(n_points) != n_points:
        raise ConfigurationError(f"grid size must be a positive integer, got {n_points!r}")
    if n_points > 1 and not d_max > d_min:
        raise ConfigurationError("grid upper end must exceed lower end")
    return np.linspace(float(d_min), float(d_max), int(n_points))

"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigurationError
from .process import N_INPUTS, N_STATES, check_state


def check_states(X) -> np.ndarray:
    """2-d float array of physically valid states, one per row."""
    try:
        X = check_array(np.atleast_2d(np.asarray(X, dtype=float)), dtype=np.float64)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    if X.shape[1] != N_STATES:
        raise ConfigurationError(f"expected {N_STATES} state columns, got {X.shape[1]}")
    return check_state(X)


def check_inputs(A, low=None, high=None) -> np.ndarray:
    """2-d float array of heat inputs, optionally bounds-checked."""
    try:
        A = check_array(np.atleast_2d(np.asarray(A, dtype=float)), dtype=np.float64)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    if A.shape[1] != N_INPUTS:
        raise ConfigurationError(f"expected {N_INPUTS} input columns, got {A.shape[1]}")
    if low is not None and np.any(A < np.asarray(low) - 1e-9):
        raise ConfigurationError("heat input below the admissible lower bound")
    if high is not None and np.any(A > np.asarray(high) + 1e-9):
        raise ConfigurationError("heat input above the admissible upper bound")
    return A


def check_positive(name, value, allow_zero=False):
    if not np.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        raise ConfigurationError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value

"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_float_array",
    "check_finite",
    "check_points",
    "check_unit",
    "check_simplex",
    "check_state",
]


def as_float_array(x, name, shape=None, ndim=None):
    """Coerce ``x`` to a float64 ndarray and verify its shape.

    ``shape`` entries set to ``None`` are wildcards, e.g. ``(None, 3)``
    accepts any number of rows with exactly three columns.
    """
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if shape is not None:
        if arr.ndim != len(shape):
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        for want, got in zip(shape, arr.shape):
            if want is not None and want != got:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_points(X, name="X"):
    """Validate an (N, 3) point array. A single point is promoted to (1, 3)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name}: expected (N, 3) points, got shape {np.shape(X)}")
    return check_finite(arr, name)


def check_unit(v, name, tol=1e-6):
    """Verify that ``v`` has unit Euclidean norm within ``tol``."""
    arr = as_float_array(v, name)
    norm = np.linalg.norm(arr, axis=-1)
    if np.any(np.abs(norm - 1.0) > tol):
        raise ValueError(f"{name}: expected unit norm, got {norm}")
    return arr


def check_simplex(w, name, tol=1e-6):
    """Verify that ``w`` lies on the probability simplex."""
    arr = as_float_array(w, name)
    if np.any(arr < -tol):
        raise ValueError(f"{name}: negative component {arr.min()}")
    s = arr.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol):
        raise ValueError(f"{name}: components sum to {s}, expected 1")
    return np.clip(arr, 0.0, None)


def check_state(t):
    """Clamp a state value to [0, 1]; returns (t_clamped, was_clamped)."""
    t = float(t)
    if not np.isfinite(t):
        raise ValueError(f"state t must be finite, got {t}")
    clamped = t < 0.0 or t > 1.0
    return min(max(t, 0.0), 1.0), clamped

"""Input validation helpers for array-shaped estimator inputs."""

from __future__ import annotations

import numpy as np


def check_array(X, *, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array and require finite values."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise ValueError(f"{name} has no features")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_vector(x, *, dim: int | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a 1-D float64 vector, optionally of a fixed length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_X_y(X, y) -> tuple[np.ndarray, np.ndarray]:
    """Validate a feature matrix with a parallel binary label vector."""
    arr = check_array(X)
    labels = np.asarray(y)
    if labels.ndim != 1:
        raise ValueError(f"y must be 1-dimensional, got shape {labels.shape}")
    if labels.shape[0] != arr.shape[0]:
        raise ValueError(f"X has {arr.shape[0]} rows but y has {labels.shape[0]}")
    if labels.dtype != bool:
        unique = set(np.unique(labels).tolist())
        if not unique <= {0, 1, 0.0, 1.0, True, False}:
            raise ValueError(f"y must be binary, got values {sorted(unique)[:5]}")
    return arr, labels.astype(np.float64)

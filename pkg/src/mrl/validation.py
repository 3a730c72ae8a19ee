"""Input checks shared by the estimators and evaluation code."""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError


def check_motion(x, name: str = "x", dtype=np.float64) -> np.ndarray:
    """Accept a (F, J, K) or (B, F, J, K) finite float array."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim not in (3, 4):
        raise ShapeError(f"{name} must be (frames, joints, coords) or batched, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or inf")
    return arr


def check_motion_batch(past, future=None) -> tuple:
    past = check_motion(past, "past")
    if past.ndim != 4:
        raise ShapeError(f"past must be batched (B, T, J, K), got {past.shape}")
    if future is None:
        return past, None
    future = check_motion(future, "future")
    if future.ndim != 4:
        raise ShapeError(f"future must be batched (B, L, J, K), got {future.shape}")
    if past.shape[0] != future.shape[0] or past.shape[2:] != future.shape[2:]:
        raise ShapeError(f"past {past.shape} and future {future.shape} disagree on batch, joints or coords")
    return past, future


def check_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError(f"features must be a non-empty 2-D array, got {X.shape}")
    if not np.isfinite(X).all():
        raise NonFiniteError("features contain NaN or inf")
    return X

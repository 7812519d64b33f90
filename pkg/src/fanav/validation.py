"""Input validation helpers for the estimator-facing API."""
from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError


def check_feature_matrix(X, dim: int, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float array of the expected feature width."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ShapeError(f"{name} must have shape (n, {dim}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def check_fitted(est, attr: str = "policy_") -> None:
    if getattr(est, attr, None) is None:
        raise RuntimeError(
            f"{type(est).__name__} is not fitted yet; call fit() first")

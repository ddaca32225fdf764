"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


def check_image(image, name: str = "image", allow_nan: bool = False) -> np.ndarray:
    """Return ``image`` as a finite float 2D array or raise ``ValueError``."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.dtype.kind not in "fiub":
        raise ValueError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32, copy=False)
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_slices(X, name: str = "X", divisor: int = 1) -> np.ndarray:
    """Validate a stack of 2D slices, shape ``(n, H, W)`` or ``(n, 1, H, W)``.

    Returns a float32 ``(n, H, W)`` array. ``divisor`` enforces that both
    spatial sizes are multiples of it (U-Net pooling constraint).
    """
    arr = np.asarray(X)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (n, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    arr = np.asarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    h, w = arr.shape[1:]
    if divisor > 1 and (h % divisor or w % divisor):
        raise ValueError(
            f"{name} spatial dims {h}x{w} must be divisible by 2**depth = {divisor}"
        )
    return arr


def check_masks(y, X=None, name: str = "y") -> np.ndarray:
    """Validate binary masks, optionally against slices ``X``; returns uint8."""
    arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (n, H, W), got {arr.shape}")
    if X is not None and arr.shape != np.asarray(X).shape[-3:] and arr.shape != np.shape(X):
        raise ValueError(f"{name} shape {arr.shape} does not match X shape {np.shape(X)}")
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"{name} must be binary, found values {values[:10]}")
    return arr.astype(np.uint8)


def check_probability(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


def check_non_negative(name: str, value: float) -> float:
    value = float(value)
    if not value >= 0.0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return value


def check_is_fitted(estimator, attribute: str = "model_") -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )

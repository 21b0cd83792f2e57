"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, dtype=np.float32, name: str = "X") -> np.ndarray:
    """Return images as a contiguous (N, 1, H, W) array of ``dtype``.

    Accepts (H, W), (N, H, W) or (N, 1, H, W) input with finite values in [0, 1].
    """
    arr = np.asarray(X)
    if arr.dtype == object:
        raise TypeError(f"{name} must be numeric, got object array")
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"{name} must have shape (N, H, W) or (N, 1, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    arr = arr.astype(dtype, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.ascontiguousarray(arr)


def check_masks(y, like: np.ndarray, name: str = "y") -> np.ndarray:
    """Binary masks shaped like the (N, 1, H, W) images ``like``, as uint8."""
    arr = np.asarray(y)
    if arr.ndim == like.ndim - 1:
        arr = arr[:, None]
    elif arr.ndim == 2 and like.shape[0] == 1:
        arr = arr[None, None]
    if arr.shape != like.shape:
        raise ValueError(f"{name} shape {np.shape(y)} does not match images {like.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return arr.astype(np.uint8)


def check_spatial(X: np.ndarray, input_size: tuple[int, int], name: str = "X") -> None:
    if tuple(X.shape[2:]) != tuple(input_size):
        raise ValueError(f"{name} spatial size {X.shape[2:]} does not match the fitted size {tuple(input_size)}")

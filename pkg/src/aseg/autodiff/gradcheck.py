"""Central-difference gradient estimates and comparison helpers."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def _scalar(value):
    # stays in the array dtype: rounding to a Python float before the
    # subtraction would cost the extra bits of extended precision
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if arr.size != 1:
        raise ValueError(f"function must return a scalar, got shape {arr.shape}")
    return arr.reshape(-1)[0]


def finite_diff_grad(f: Callable[[], object] | Callable[[Tensor], object], x: Tensor,
                     h: float = 1e-5, pass_x: bool = True) -> np.ndarray:
    """Estimate d f / d x elementwise by ``(f(x + h e) - f(x - h e)) / 2h``.

    ``x.data`` is perturbed in place and restored after each element, so ``f``
    may either take ``x`` as its argument or close over it (``pass_x=False``).
    Only meaningful in 64-bit (or extended) mode. The difference is taken in
    the dtype of ``x``; the estimate is returned as float64.
    """
    call = (lambda: f(x)) if pass_x else f
    data = x.data
    flat = data.reshape(-1)
    if not np.shares_memory(flat, data):
        raise ValueError("finite_diff_grad needs a contiguous tensor")
    grad = np.zeros(data.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = _scalar(call())
        flat[i] = orig - h
        down = _scalar(call())
        flat[i] = orig
        step = (orig + h) - (orig - h)  # the step actually taken after rounding
        grad[i] = (up - down) / step
    return grad.reshape(data.shape)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor) over all elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))

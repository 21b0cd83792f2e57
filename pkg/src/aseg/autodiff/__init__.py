"""Minimal NCHW tensor library with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import finite_diff_grad, max_relative_error
from .ops import (
    activation,
    batch_norm,
    concat,
    conv2d,
    matmul,
    pool2d,
    reduce_channels,
    reduce_spatial,
    sigmoid,
    softmax,
    upsample_nearest,
)
from .tensor import (
    EXACT,
    FAST,
    Tape,
    Tensor,
    backward,
    corrupt_backward,
    no_grad,
    resolve_dtype,
)

__all__ = [
    "EXACT", "FAST", "Tape", "Tensor", "activation", "backward", "batch_norm",
    "concat", "conv2d", "corrupt_backward", "finite_diff_grad", "matmul",
    "max_relative_error", "no_grad", "ops", "pool2d", "reduce_channels",
    "reduce_spatial", "resolve_dtype", "sigmoid", "softmax", "upsample_nearest",
]

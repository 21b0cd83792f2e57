"""Differentiable kernels.

Every op takes and returns :class:`Tensor` values and, when a tape is
active and an input requires a gradient, records its backward rule.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, should_record

__all__ = [
    "activation", "add", "batch_norm", "clip", "concat", "conv2d", "div", "exp",
    "index", "log", "matmul", "mean", "mul", "neg", "pool2d", "power",
    "reduce_channels", "reduce_spatial", "relu", "relu_squared", "reshape",
    "sigmoid", "softmax", "softplus", "sub", "sum", "swap_last", "transpose",
    "upsample_nearest",
]


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise TypeError(f"mixed precision: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    return _lift(a), _lift(b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _emit(name, inputs, data, backward_fn) -> Tensor:
    out = Tensor(data)
    tape = should_record(*inputs)
    if tape is not None:
        tape.record(name, inputs, out, backward_fn)
    return out


# --------------------------------------------------------------------------- #
# Elementwise arithmetic
# --------------------------------------------------------------------------- #

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _emit("div", (a, b), out, back)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant exponent."""
    p = float(exponent)
    out = a.data ** p

    def back(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        return (g * p * a.data ** (p - 1.0),)

    return _emit("power", (a,), out, back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is passed only where the input is inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


# --------------------------------------------------------------------------- #
# Activations
# --------------------------------------------------------------------------- #

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return _emit("softplus", (a,), out, lambda g: (g * _sigmoid_np(a.data),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", (a,), np.where(pos, a.data, 0).astype(a.dtype), lambda g: (g * pos,))


def relu_squared(a: Tensor) -> Tensor:
    r = np.maximum(a.data, 0)
    return _emit("relu_squared", (a,), r * r, lambda g: (g * 2.0 * r,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ValueError("softmax needs a last axis of extent >= 1")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), out, back)


_ACTIVATIONS = {
    "relu": relu,
    "relu_squared": relu_squared,
    "sigmoid": sigmoid,
    "softmax_last_dim": softmax,
}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(a)


# --------------------------------------------------------------------------- #
# Shape manipulation and reductions
# --------------------------------------------------------------------------- #

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    """Swap the two trailing axes (matrix transpose on the last two extents)."""
    if a.ndim < 2:
        raise ValueError("swap_last needs at least 2 dimensions")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) != 1:
        raise TypeError(f"mixed precision in concat: {dtypes}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), back)


def index(a: Tensor, key) -> Tensor:
    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _emit("index", (a,), np.asarray(a.data[key]), back)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", (a,), out, back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)

    return _emit("mean", (a,), out, back)


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes, broadcasting leading ones."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), a.data @ b.data, back)


# --------------------------------------------------------------------------- #
# Convolution and pooling (NCHW)
# --------------------------------------------------------------------------- #

def _out_extent(n: int, k: int, stride: int, padding: int, dilation: int, what: str) -> int:
    span = n + 2 * padding - dilation * (k - 1) - 1
    if span < 0 or span % stride:
        raise ValueError(
            f"{what}: extent {n} with kernel {k}, stride {stride}, padding {padding}, "
            f"dilation {dilation} gives a non-integral or empty output"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation via an im2col matrix product.

    ``weight`` has shape (C_out, C_in, kH, kW); ``bias`` has shape (C_out,).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be positive, padding nonnegative")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match kernel {weight.shape}")
    if x.dtype != weight.dtype:
        raise TypeError(f"mixed precision: {x.dtype} vs {weight.dtype}")
    ho = _out_extent(h, kh, stride, padding, dilation, "conv2d height")
    wo = _out_extent(w, kw, stride, padding, dilation, "conv2d width")

    hw = ho * wo
    kdim = c * kh * kw
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, :, i, j] = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                                  c0:c0 + stride * (wo - 1) + 1:stride]
    del xp
    cols = cols.reshape(n, kdim, hw)
    wmat = weight.data.reshape(c_out, kdim)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, c_out, ho, wo)

    def back(g):
        g3 = g.reshape(n, c_out, hw)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
            for i in range(kh):
                r0 = i * dilation
                for j in range(kw):
                    c0 = j * dilation
                    gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                        c0:c0 + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        def back_nobias(g):
            gx, gw, _ = back(g)
            return gx, gw
        return _emit("conv2d", inputs, out, back_nobias)
    return _emit("conv2d", inputs, out, back)


def pool2d(x: Tensor, mode: str = "max", window: int = 2, stride: int | None = None) -> Tensor:
    """Windowed per-channel max or average reduction.

    Max-pool ties send the gradient to the first maximal element in
    row-major window order.
    """
    stride = window if stride is None else stride
    if mode not in ("max", "avg"):
        raise ValueError(f"pool2d mode must be 'max' or 'avg', got {mode!r}")
    if window < 1 or stride < 1:
        raise ValueError("pool2d window and stride must be positive")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool2d window {window} exceeds spatial extent {h}x{w}")
    if window == stride and (h % stride or w % stride):
        raise ValueError(f"pool2d: extent {h}x{w} not divisible by stride {stride}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    def win(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    offsets = [(i, j) for i in range(window) for j in range(window)]
    if mode == "avg":
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i, j in offsets:
            out += x.data[win(i, j)]
        out /= window * window

        def back(g):
            gx = np.zeros_like(x.data)
            share = g / (window * window)
            for i, j in offsets:
                gx[win(i, j)] += share
            return (gx,)

        return _emit("pool2d", (x,), out, back)

    out = x.data[win(0, 0)].copy()
    arg = np.zeros(out.shape, dtype=np.int32)
    for k, (i, j) in enumerate(offsets[1:], start=1):
        cand = x.data[win(i, j)]
        better = cand > out
        out = np.where(better, cand, out)
        arg[better] = k

    def back(g):
        gx = np.zeros_like(x.data)
        for k, (i, j) in enumerate(offsets):
            gx[win(i, j)] += g * (arg == k)
        return (gx,)

    return _emit("pool2d", (x,), out, back)


def _reduce(x: Tensor, mode: str, axis, name: str) -> Tensor:
    if mode == "avg":
        return mean(x, axis=axis, keepdims=True)
    if mode != "max":
        raise ValueError(f"{name} mode must be 'avg' or 'max', got {mode!r}")
    if x.size == 0:
        raise ValueError(f"{name} of an empty tensor")
    # Move reduced axes last, flatten them, take the first arg-max.
    keep = [i for i in range(x.ndim) if i not in axis]
    moved = x.data.transpose(keep + list(axis))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    arg = flat.argmax(axis=-1)
    out_flat = np.take_along_axis(flat, arg[..., None], axis=-1)
    out_shape = tuple(1 if i in axis else x.shape[i] for i in range(x.ndim))
    out = out_flat.reshape(out_shape)

    def back(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g.reshape(out_flat.shape), axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (gmoved.transpose(np.argsort(keep + list(axis))),)

    return _emit(name, (x,), out, back)


def reduce_spatial(x: Tensor, mode: str = "avg") -> Tensor:
    """Global per-channel reduction over H x W; returns N x C x 1 x 1."""
    if x.ndim != 4:
        raise ValueError(f"reduce_spatial expects NCHW input, got {x.shape}")
    return _reduce(x, mode, (2, 3), "reduce_spatial")


def reduce_channels(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-pixel reduction across channels; returns N x 1 x H x W."""
    if x.ndim != 4:
        raise ValueError(f"reduce_channels expects NCHW input, got {x.shape}")
    return _reduce(x, mode, (1,), "reduce_channels")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be positive")
    if factor == 1:
        return reshape(x, x.shape)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit("upsample_nearest", (x,), out, back)


# --------------------------------------------------------------------------- #
# Batch normalization
# --------------------------------------------------------------------------- #

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    are updated in place with an exponential moving average (unbiased
    variance); otherwise the running buffers normalize.
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batch_norm parameters {scale.shape}/{shift.shape} do not match {c} channels")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // c
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def back(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * scale.data.reshape(bshape)
        if training:
            m = x.size // c
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gscale, gshift

    return _emit("batch_norm", (x, scale, shift), out, back)

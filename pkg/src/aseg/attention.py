"""Skip-connection attention: CBAM gates and the hybrid dense/sparse self-attention layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops

SKIP_MODES = ("series", "parallel_sum")
SPATIAL_KERNEL = 7
SPATIAL_DILATION = 4
SPATIAL_PADDING = SPATIAL_DILATION * (SPATIAL_KERNEL - 1) // 2


@dataclass
class CbamParams:
    """Learnable weights of one CBAM block.

    The shared MLP maps C -> C/r -> C with a ReLU between the layers. The
    spatial kernel is 7x7 with dilation 4 over the [avg; max] channel maps.
    """

    mlp_w1: Tensor  # (C/r, C)
    mlp_b1: Tensor  # (C/r,)
    mlp_w2: Tensor  # (C, C/r)
    mlp_b2: Tensor  # (C,)
    spatial_kernel: Tensor  # (1, 2, 7, 7)
    spatial_bias: Tensor  # (1,)

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    @property
    def reduction(self) -> int:
        return self.channels // self.mlp_w1.shape[0]

    @staticmethod
    def shapes(channels: int, reduction: int) -> dict[str, tuple[int, ...]]:
        if reduction < 1 or channels % reduction:
            raise ValueError(f"CBAM reduction ratio {reduction} must divide channel count {channels}")
        hidden = channels // reduction
        return {
            "mlp_w1": (hidden, channels),
            "mlp_b1": (hidden,),
            "mlp_w2": (channels, hidden),
            "mlp_b2": (channels,),
            "spatial_kernel": (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL),
            "spatial_bias": (1,),
        }

    @classmethod
    def init(cls, channels: int, reduction: int = 2, rng=None, dtype="float64") -> CbamParams:
        rng = np.random.default_rng(rng)
        values = {}
        for name, shape in cls.shapes(channels, reduction).items():
            values[name] = Tensor(init_weight(name, shape, rng), requires_grad=True, dtype=dtype)
        return cls(**values)

    @classmethod
    def zeros(cls, channels: int, reduction: int = 2, dtype="float64") -> CbamParams:
        return cls(**{name: Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)
                      for name, shape in cls.shapes(channels, reduction).items()})


@dataclass
class HalParams:
    """Learnable weights of one hybrid attention layer.

    Q/K/V projections are shared by every patch. ``bias`` is the M^2 x M^2
    position bias table and ``omega_logits`` are squashed by softmax into
    the two branch weights.
    """

    w_q: Tensor  # (C, d)
    w_k: Tensor  # (C, d)
    w_v: Tensor  # (C, d)
    w_o: Tensor  # (d, C)
    bias: Tensor  # (M^2, M^2)
    omega_logits: Tensor  # (2,)
    patch_size: int = 4

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]

    @staticmethod
    def shapes(channels: int, patch_size: int, dim: int | None = None) -> dict[str, tuple[int, ...]]:
        if patch_size < 1:
            raise ValueError("patch size must be positive")
        d = channels if dim is None else dim
        if d < 1:
            raise ValueError("attention dim must be positive")
        m2 = patch_size * patch_size
        return {
            "w_q": (channels, d),
            "w_k": (channels, d),
            "w_v": (channels, d),
            "w_o": (d, channels),
            "bias": (m2, m2),
            "omega_logits": (2,),
        }

    @classmethod
    def init(cls, channels: int, patch_size: int = 4, dim: int | None = None, rng=None,
             dtype="float64") -> HalParams:
        rng = np.random.default_rng(rng)
        values = {name: Tensor(init_weight(name, shape, rng), requires_grad=True, dtype=dtype)
                  for name, shape in cls.shapes(channels, patch_size, dim).items()}
        return cls(patch_size=patch_size, **values)

    def omega(self) -> Tensor:
        return ops.softmax(self.omega_logits)


def init_weight(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Fan-in scaled uniform for weights; zeros for biases, B and omega logits."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("bias", "omega_logits", "shift", "b") or leaf.startswith("mlp_b") or leaf.endswith("_bias"):
        return np.zeros(shape)
    if leaf == "scale":
        return np.ones(shape)
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        bound = math.sqrt(6.0 / fan_in)
    elif leaf.startswith("mlp_w"):
        fan_in = shape[1]
        bound = math.sqrt(6.0 / fan_in)
    else:
        # projections are stored (in, out)
        fan_in = shape[0]
        bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------- #
# CBAM
# --------------------------------------------------------------------------- #

def _shared_mlp(desc: Tensor, p: CbamParams) -> Tensor:
    hidden = ops.relu(ops.matmul(desc, ops.swap_last(p.mlp_w1)) + p.mlp_b1)
    return ops.matmul(hidden, ops.swap_last(p.mlp_w2)) + p.mlp_b2


def channel_gate(f: Tensor, p: CbamParams) -> Tensor:
    n, c = f.shape[:2]
    if c != p.channels:
        raise ValueError(f"CBAM built for {p.channels} channels, got input {f.shape}")
    avg = ops.reduce_spatial(f, "avg").reshape(n, c)
    mx = ops.reduce_spatial(f, "max").reshape(n, c)
    return ops.sigmoid(_shared_mlp(avg, p) + _shared_mlp(mx, p)).reshape(n, c, 1, 1)


def channel_attention(f: Tensor, p: CbamParams) -> Tensor:
    return f * channel_gate(f, p)


def spatial_gate(f_c: Tensor, p: CbamParams) -> Tensor:
    pooled = ops.concat([ops.reduce_channels(f_c, "avg"), ops.reduce_channels(f_c, "max")], axis=1)
    logits = ops.conv2d(pooled, p.spatial_kernel, p.spatial_bias,
                        padding=SPATIAL_PADDING, dilation=SPATIAL_DILATION)
    return ops.sigmoid(logits)


def spatial_attention(f_c: Tensor, p: CbamParams) -> Tensor:
    return f_c * spatial_gate(f_c, p)


def cbam(f: Tensor, p: CbamParams, trace: dict | None = None) -> Tensor:
    """Channel gate followed by spatial gate; shape-preserving."""
    f_c = channel_attention(f, p)
    gate = spatial_gate(f_c, p)
    if trace is not None:
        trace["cbam_gate"] = gate.data[:, 0]
    return f_c * gate


# --------------------------------------------------------------------------- #
# Hybrid attention layer
# --------------------------------------------------------------------------- #

def patch_partition(f: Tensor, m: int) -> Tensor:
    """Tile an NCHW map into (N * H/m * W/m, m*m, C) patch matrices.

    Patches are ordered by batch, then patch row, then patch column; rows
    within a patch are row-major pixel order.
    """
    n, c, h, w = f.shape
    if m < 1 or h % m or w % m:
        raise ValueError(f"patch size {m} must divide spatial extent {h}x{w}")
    t = f.reshape(n, c, h // m, m, w // m, m)
    t = t.transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(n * (h // m) * (w // m), m * m, c)


def patch_merge(patches: Tensor, shape: tuple[int, int, int, int], m: int) -> Tensor:
    """Inverse of :func:`patch_partition` for an NCHW target ``shape``."""
    n, c, h, w = shape
    t = patches.reshape(n, h // m, w // m, m, m, c)
    t = t.transpose(0, 5, 1, 3, 2, 4)
    return t.reshape(n, c, h, w)


def attention_scores(q: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """S = Q K^T / sqrt(d) + B."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key widths differ: {q.shape} vs {k.shape}")
    rows, cols = q.shape[-2], k.shape[-2]
    if b.shape != (rows, cols):
        raise ValueError(f"bias table {b.shape} does not match scores ({rows}, {cols})")
    d = q.shape[-1]
    return ops.matmul(q, ops.swap_last(k)) * (1.0 / math.sqrt(d)) + b


def dal(s: Tensor) -> Tensor:
    """Dense branch: row-wise softmax."""
    return ops.softmax(s)


def sal(s: Tensor) -> Tensor:
    """Sparse branch: ReLU squared, exactly zero wherever the logit is <= 0."""
    return ops.relu_squared(s)


def hal(f: Tensor, p: HalParams, trace: dict | None = None) -> Tensor:
    m = p.patch_size
    if f.shape[1] != p.w_q.shape[0]:
        raise ValueError(f"HAL built for {p.w_q.shape[0]} channels, got input {f.shape}")
    x = patch_partition(f, m)
    q = ops.matmul(x, p.w_q)
    k = ops.matmul(x, p.w_k)
    v = ops.matmul(x, p.w_v)
    s = attention_scores(q, k, p.bias)
    dense, sparse = dal(s), sal(s)
    omega = p.omega()
    mixed = dense * omega[0] + sparse * omega[1]
    out = ops.matmul(ops.matmul(mixed, v), p.w_o)
    if trace is not None:
        # attention received by each key pixel, laid back onto the image grid
        n, _, h, w = f.shape
        for key, att in (("dal", dense), ("sal", sparse)):
            received = att.data.sum(axis=1)[:, :, None]
            trace[key] = patch_merge(Tensor(received), (n, 1, h, w), m).data[:, 0]
    return patch_merge(out, f.shape, m)


def skip_refine(f: Tensor, cbam_p: CbamParams | None, hal_p: HalParams | None,
                mode: str = "series", trace: dict | None = None) -> Tensor:
    """Refine an encoder skip feature.

    ``series`` computes hal(cbam(f)); ``parallel_sum`` computes
    cbam(f) + hal(f). A missing block is treated as the identity.
    """
    if mode not in SKIP_MODES:
        raise ValueError(f"skip mode must be one of {SKIP_MODES}, got {mode!r}")
    if cbam_p is None and hal_p is None:
        return f
    if hal_p is None:
        return cbam(f, cbam_p, trace)
    if cbam_p is None:
        return hal(f, hal_p, trace)
    if mode == "series":
        return hal(cbam(f, cbam_p, trace), hal_p, trace)
    return cbam(f, cbam_p, trace) + hal(f, hal_p, trace)

"""Four-level residual U-Net with attention-refined skip connections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .attention import SKIP_MODES, CbamParams, HalParams, init_weight, skip_refine
from .autodiff import Tensor, ops, resolve_dtype


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 4
    base_channels: int = 16
    input_size: tuple[int, int] = (128, 128)
    in_channels: int = 1
    residual: bool = True
    use_cbam: bool = True
    use_hal: bool = True
    hal_levels: tuple[int, ...] | None = None
    patch_size: int = 4
    attn_dim: int | None = None
    reduction: int = 2
    skip_mode: str = "series"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.hal_levels is not None:
            object.__setattr__(self, "hal_levels", tuple(sorted(int(v) for v in self.hal_levels)))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        h, w = self.input_size
        step = 2 ** self.levels
        if h % step or w % step:
            raise ValueError(f"input size {h}x{w} must be divisible by 2**levels = {step}")
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}")
        for lvl in range(self.levels):
            ch = self.channels(lvl)
            if self.use_cbam and ch % self.reduction:
                raise ValueError(f"CBAM reduction {self.reduction} does not divide {ch} channels at level {lvl}")
            if self.hal_at(lvl):
                lh, lw = h >> lvl, w >> lvl
                if lh % self.patch_size or lw % self.patch_size:
                    raise ValueError(f"patch size {self.patch_size} does not divide {lh}x{lw} at level {lvl}")
        if self.hal_levels is not None and any(not 0 <= v < self.levels for v in self.hal_levels):
            raise ValueError(f"hal_levels {self.hal_levels} outside 0..{self.levels - 1}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.levels)

    def hal_at(self, level: int) -> bool:
        return self.use_hal and (self.hal_levels is None or level in self.hal_levels)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _res_block_shapes(prefix: str, c_in: int, c_out: int, residual: bool) -> dict[str, tuple[int, ...]]:
    shapes = {
        f"{prefix}.conv1.w": (c_out, c_in, 3, 3),
        f"{prefix}.bn1.scale": (c_out,),
        f"{prefix}.bn1.shift": (c_out,),
        f"{prefix}.conv2.w": (c_out, c_out, 3, 3),
        f"{prefix}.bn2.scale": (c_out,),
        f"{prefix}.bn2.shift": (c_out,),
    }
    if residual and c_in != c_out:
        shapes[f"{prefix}.proj.w"] = (c_out, c_in, 1, 1)
        shapes[f"{prefix}.proj.b"] = (c_out,)
    return shapes


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable tensor, derived from the config alone."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_prev = cfg.in_channels
    for lvl in range(cfg.levels):
        c = cfg.channels(lvl)
        shapes.update(_res_block_shapes(f"enc{lvl}", c_prev, c, cfg.residual))
        c_prev = c
    shapes.update(_res_block_shapes("bottleneck", c_prev, cfg.bottleneck_channels, cfg.residual))
    for lvl in range(cfg.levels):
        c = cfg.channels(lvl)
        if cfg.use_cbam:
            for name, shape in CbamParams.shapes(c, cfg.reduction).items():
                shapes[f"att{lvl}.cbam.{name}"] = shape
        if cfg.hal_at(lvl):
            for name, shape in HalParams.shapes(c, cfg.patch_size, cfg.attn_dim).items():
                shapes[f"att{lvl}.hal.{name}"] = shape
    for lvl in reversed(range(cfg.levels)):
        c = cfg.channels(lvl)
        shapes.update(_res_block_shapes(f"dec{lvl}", cfg.channels(lvl + 1) + c, c, cfg.residual))
    shapes["head.w"] = (1, cfg.base_channels, 1, 1)
    shapes["head.b"] = (1,)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Batch-norm running statistics, one mean/var pair per BN layer."""
    out = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".scale"):
            stem = name[: -len(".scale")]
            out[f"{stem}.running_mean"] = shape
            out[f"{stem}.running_var"] = shape
    return out


@dataclass
class ModelParams:
    """Named learnable tensors plus batch-norm running buffers."""

    config: ModelConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed=0, dtype="float32") -> ModelParams:
        rng = np.random.default_rng(seed)
        dt = resolve_dtype(dtype)
        tensors = {name: Tensor(init_weight(name, shape, rng).astype(dt), requires_grad=True)
                   for name, shape in parameter_shapes(cfg).items()}
        buffers = {name: (np.ones(shape) if name.endswith("_var") else np.zeros(shape)).astype(dt)
                   for name, shape in buffer_shapes(cfg).items()}
        return cls(cfg, tensors, buffers)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> ModelParams:
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> ModelParams:
        dt = resolve_dtype(dtype)
        return ModelParams(
            self.config,
            {k: Tensor(v.data.astype(dt), requires_grad=True) for k, v in self.tensors.items()},
            {k: v.astype(dt) for k, v in self.buffers.items()},
        )

    def validate(self) -> None:
        expected = parameter_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape}, config implies {shape}")
        for name, shape in buffer_shapes(self.config).items():
            if name not in self.buffers or self.buffers[name].shape != shape:
                raise ValueError(f"buffer {name} missing or misshapen")

    def cbam(self, level: int) -> CbamParams | None:
        if not self.config.use_cbam:
            return None
        prefix = f"att{level}.cbam."
        return CbamParams(**{f.name: self.tensors[prefix + f.name] for f in dataclasses.fields(CbamParams)})

    def hal(self, level: int) -> HalParams | None:
        if not self.config.hal_at(level):
            return None
        prefix = f"att{level}.hal."
        names = [f.name for f in dataclasses.fields(HalParams) if f.name != "patch_size"]
        return HalParams(patch_size=self.config.patch_size, **{n: self.tensors[prefix + n] for n in names})


def _bn(x: Tensor, params: ModelParams, stem: str, training: bool) -> Tensor:
    return ops.batch_norm(
        x, params[f"{stem}.scale"], params[f"{stem}.shift"],
        params.buffers[f"{stem}.running_mean"], params.buffers[f"{stem}.running_var"], training,
    )


def res_block(f: Tensor, params: ModelParams, prefix: str, training: bool = True) -> Tensor:
    """Two conv3x3-BN-ReLU stages; adds the (projected) input when residual."""
    w1 = params[f"{prefix}.conv1.w"]
    if f.shape[1] != w1.shape[1]:
        raise ValueError(f"{prefix}: input has {f.shape[1]} channels, block expects {w1.shape[1]}")
    y = ops.relu(_bn(ops.conv2d(f, w1, padding=1), params, f"{prefix}.bn1", training))
    y = _bn(ops.conv2d(y, params[f"{prefix}.conv2.w"], padding=1), params, f"{prefix}.bn2", training)
    if params.config.residual:
        if f"{prefix}.proj.w" in params:
            skip = ops.conv2d(f, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
        else:
            skip = f
        y = y + skip
    return ops.relu(y)


def encode(image: Tensor, params: ModelParams, training: bool = True) -> tuple[list[Tensor], Tensor]:
    cfg = params.config
    h, w = image.shape[2:]
    step = 2 ** cfg.levels
    if h % step or w % step:
        raise ValueError(f"input {h}x{w} not divisible by 2**levels = {step}")
    skips = []
    x = image
    for lvl in range(cfg.levels):
        x = res_block(x, params, f"enc{lvl}", training)
        skips.append(x)
        x = ops.pool2d(x, "max", 2, 2)
    return skips, res_block(x, params, "bottleneck", training)


def decode(bottleneck: Tensor, skips: list[Tensor], params: ModelParams, training: bool = True) -> Tensor:
    """Upsample, concatenate the refined skip, residual block; 1x1 head to logits."""
    x = bottleneck
    for lvl in reversed(range(params.config.levels)):
        up = ops.upsample_nearest(x, 2)
        skip = skips[lvl]
        if up.shape[0] != skip.shape[0] or up.shape[2:] != skip.shape[2:]:
            raise ValueError(f"decoder level {lvl}: upsampled {up.shape} does not match skip {skip.shape}")
        x = res_block(ops.concat([up, skip], axis=1), params, f"dec{lvl}", training)
    return ops.conv2d(x, params["head.w"], params["head.b"])


def forward_logits(image: Tensor, params: ModelParams, training: bool = True,
                   trace: list[dict] | None = None) -> Tensor:
    cfg = params.config
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ValueError(f"expected N x {cfg.in_channels} x H x W input, got {image.shape}")
    skips, bottom = encode(image, params, training)
    refined = []
    for lvl, skip in enumerate(skips):
        level_trace = None
        if trace is not None:
            level_trace = {}
            trace.append(level_trace)
        refined.append(skip_refine(skip, params.cbam(lvl), params.hal(lvl), cfg.skip_mode, level_trace))
    return decode(bottom, refined, params, training)


def forward(image: Tensor, params: ModelParams, training: bool = False,
            trace: list[dict] | None = None) -> Tensor:
    """Foreground probability map, N x 1 x H x W, values in (0, 1)."""
    return ops.sigmoid(forward_logits(image, params, training, trace))

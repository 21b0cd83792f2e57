"""End-to-end gradient check of the full model against central differences."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, corrupt_backward, finite_diff_grad, max_relative_error
from .data import synth_dataset
from .losses import LossWeights, combined_loss
from .model import ModelConfig, ModelParams, forward_logits

GRADCHECK_TOL = 1e-5
GROUPS = ("encoder", "decoder", "cbam", "hal", "bn", "head")


def parameter_group(name: str) -> str:
    if ".bn" in name:
        return "bn"
    if name.startswith(("enc", "bottleneck")):
        return "encoder"
    if name.startswith("dec"):
        return "decoder"
    if ".cbam." in name:
        return "cbam"
    if ".hal." in name:
        return "hal"
    return "head"


@dataclass
class GradcheckRow:
    name: str
    group: str
    size: int
    max_rel_error: float
    max_abs_grad: float

    @property
    def dead(self) -> bool:
        return self.max_abs_grad == 0.0


@dataclass
class GradcheckReport:
    rows: list[GradcheckRow]
    tol: float = GRADCHECK_TOL
    seconds: float = 0.0
    config: ModelConfig | None = field(default=None, repr=False)

    @property
    def group_errors(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.rows:
            out[r.group] = max(out.get(r.group, 0.0), r.max_rel_error)
        return out

    @property
    def failed_groups(self) -> list[str]:
        return [g for g, e in self.group_errors.items() if not e < self.tol]

    @property
    def dead_parameters(self) -> list[str]:
        return [r.name for r in self.rows if r.dead]

    @property
    def passed(self) -> bool:
        return all(r.max_rel_error < self.tol and not r.dead for r in self.rows)

    def format(self) -> str:
        lines = [f"{'parameter':<32} {'group':<8} {'size':>6} {'max_rel_err':>12}"]
        for r in self.rows:
            flag = "  FAIL" if not r.max_rel_error < self.tol else "  ZERO-GRAD" if r.dead else ""
            lines.append(f"{r.name:<32} {r.group:<8} {r.size:>6} {r.max_rel_error:>12.3e}{flag}")
        lines.append("")
        for g, e in self.group_errors.items():
            lines.append(f"group {g:<8} max_rel_err {e:.3e} {'ok' if e < self.tol else 'FAIL'}")
        if self.passed:
            verdict = "PASS"
        else:
            bad = self.failed_groups + [f"zero gradient: {n}" for n in self.dead_parameters]
            verdict = "FAIL (" + ", ".join(bad) + ")"
        lines.append(f"gradcheck {verdict} tol={self.tol:g} time={self.seconds:.1f}s")
        return "\n".join(lines)


def generic_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """float64 parameters at a generic point: zero-initialized tensors get small noise.

    Zero biases, a zero position table and equal branch logits are special
    points where some gradients vanish by symmetry. BN shifts and the CBAM
    hidden layer are pushed positive: with two channels per level a single
    all-negative ReLU channel would zero whole gradient tensors.
    """
    params = ModelParams.init(cfg, seed=seed, dtype="float64")
    rng = np.random.default_rng(seed + 1)
    for name, t in params:
        if name.endswith(".scale"):
            t.data += rng.uniform(-0.2, 0.2, t.shape)
        elif name.endswith(".shift"):
            t.data += rng.uniform(0.2, 0.6, t.shape)
        elif name.endswith("mlp_b1"):
            t.data += rng.uniform(1.5, 2.5, t.shape)
        elif name.endswith("mlp_w1"):
            # skip features are post-ReLU, so positive w1 and b1 keep the hidden units alive
            t.data[...] = np.abs(t.data)
        elif not np.any(t.data):
            t.data += rng.uniform(-0.3, 0.3, t.shape)
    return params


def oracle_dtype() -> np.dtype:
    """Extended precision when the platform has it, else float64.

    Many true gradients here are 1e-9 or smaller; a float64 central
    difference of an O(1) loss carries ~1e-12 of roundoff, which alone
    exceeds the tolerance against the 1e-8 floor.
    """
    ext = np.dtype(np.longdouble)
    return ext if np.finfo(ext).eps < np.finfo(np.float64).eps else np.dtype(np.float64)


def gradcheck_model(size: int = 16, levels: int = 2, base_channels: int = 2, batch: int = 2,
                    seed: int = 3, h: float = 1e-5, corrupt: str | None = None,
                    skip_mode: str = "series") -> GradcheckReport:
    """Compare backward gradients of the combined loss with central differences.

    The analytic pass runs in float64. The central differences run on an
    extended-precision copy of the same parameters (see :func:`oracle_dtype`).
    ``corrupt`` names an op whose backward rule is deliberately scaled, as a
    negative control.
    """
    start = time.perf_counter()
    cfg = ModelConfig(levels=levels, base_channels=base_channels, input_size=(size, size),
                      skip_mode=skip_mode)
    params = generic_params(cfg, seed)
    samples = synth_dataset(batch, seed, size=(size, size))
    images = np.stack([s.image for s in samples])[:, None]
    masks = np.stack([s.mask for s in samples])[:, None]
    weights = LossWeights()
    odt = oracle_dtype()
    oracle = params.astype(odt)

    def loss_value(p: ModelParams) -> Tensor:
        dt = p.dtype
        logits = forward_logits(Tensor(images.astype(dt)), p, training=True)
        return combined_loss(logits, masks.astype(dt), weights, from_logits=True)

    saved = {k: v.copy() for k, v in params.buffers.items()}
    params.zero_grad()
    with Tape() as tape:
        loss = loss_value(params)
    if corrupt:
        with corrupt_backward(corrupt):
            tape.backward(loss)
    else:
        tape.backward(loss)

    rows = []
    for name, t in params:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_diff_grad(lambda: loss_value(oracle), oracle[name], h=h, pass_x=False)
        rows.append(GradcheckRow(name, parameter_group(name), t.size,
                                 max_relative_error(analytic, numeric), float(np.abs(analytic).max())))
    for k, v in saved.items():
        params.buffers[k][...] = v
    return GradcheckReport(rows, seconds=time.perf_counter() - start, config=cfg)

"""Ablation and loss-combination harnesses on synthetic data.

The four architecture variants and seven loss presets mirror the published
comparisons. At desk scale only the qualitative property is checked: every
variant learns, every preset trains with a finite, falling loss.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Sample
from .losses import LossWeights
from .model import ModelConfig, ModelParams
from .training import NonFiniteLossError, TrainConfig, evaluate, train

# (label, residual, use_cbam, use_hal)
ABLATION_VARIANTS = (
    ("(i) U-Net", False, False, False),
    ("(ii) Res-UNet", True, False, False),
    ("(iii) Res-UNet w/CBAM", True, True, False),
    ("(iv) Res-UNet w/CBAM+HAL", True, True, True),
)

# name -> (dice alpha, bce beta, focal lambda); "+" combinations use equal weights
LOSS_PRESETS: dict[str, tuple[float, float, float]] = {
    "bce": (0.0, 1.0, 0.0),
    "dice": (1.0, 0.0, 0.0),
    "focal": (0.0, 0.0, 1.0),
    "bce+dice": (0.5, 0.5, 0.0),
    "bce+focal": (0.0, 0.5, 0.5),
    "dice+focal": (0.5, 0.0, 0.5),
    "bce+dice+focal": (1 / 3, 1 / 3, 1 / 3),
}


def ablation_configs(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    return [(label, base.replace(residual=res, use_cbam=cbam, use_hal=hal))
            for label, res, cbam, hal in ABLATION_VARIANTS]


@dataclass
class VariantResult:
    label: str
    config: ModelConfig
    dice: float
    iou: float
    steps: int
    seconds: float
    final_loss: float


def run_ablation(train_samples: Sequence[Sample], eval_samples: Sequence[Sample] | None,
                 base: ModelConfig, tcfg: TrainConfig, dtype="float32",
                 on_variant: Callable[[VariantResult], None] | None = None) -> list[VariantResult]:
    """Train every variant from the same seed and score it on ``eval_samples``.

    With no evaluation set the variants are scored on their own training data.
    """
    scored = eval_samples if eval_samples else train_samples
    out = []
    for label, cfg in ablation_configs(base):
        start = time.perf_counter()
        params = ModelParams.init(cfg, seed=tcfg.seed, dtype=dtype)
        result = train(params, train_samples, [], tcfg)
        report = evaluate(result.params, scored, tcfg.threshold)
        res = VariantResult(label, cfg, report.dice, report.iou, result.steps,
                            time.perf_counter() - start,
                            result.step_losses[-1] if result.step_losses else math.nan)
        if on_variant:
            on_variant(res)
        out.append(res)
    return out


def _cell(value: float, baseline: float | None) -> str:
    text = f"{100 * value:.2f}"
    if baseline is None:
        return text
    return f"{text}({100 * (value - baseline):+.2f})"


def format_ablation(results: Sequence[VariantResult]) -> str:
    """Dice/IoU rows in x(+y) form, y being the gain over the first variant, in %."""
    if not results:
        return ""
    header = ["Metrics"] + [r.label for r in results]
    rows = [header]
    for metric in ("dice", "iou"):
        base = getattr(results[0], metric)
        row = ["Dice" if metric == "dice" else "IoU"]
        row += [_cell(getattr(r, metric), None if i == 0 else base) for i, r in enumerate(results)]
        rows.append(row)
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


def loss_decreased(losses: Sequence[float], window: int = 20) -> bool:
    """True when the mean of the last ``window`` losses is below that of the first ``window``.

    Needs at least two windows of history.
    """
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size < 2 * window:
        raise ValueError(f"need at least {2 * window} losses, got {arr.size}")
    return bool(arr[-window:].mean() < arr[:window].mean())


@dataclass
class PresetResult:
    name: str
    weights: LossWeights
    losses: list[float]
    window: int = 20

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.losses)))

    @property
    def decreased(self) -> bool:
        return self.finite and loss_decreased(self.losses, self.window)

    @property
    def ok(self) -> bool:
        return self.finite and self.decreased


def run_loss_presets(samples: Sequence[Sample], cfg: ModelConfig, tcfg: TrainConfig, dtype="float32",
                     presets: Sequence[str] | None = None, window: int = 20) -> list[PresetResult]:
    """Train one model per preset with identical seed and schedule; keep per-step losses.

    A non-finite loss aborts that preset's run; it is reported, not raised.
    """
    out = []
    for name in presets or LOSS_PRESETS:
        weights = LossWeights(*LOSS_PRESETS[name])
        run_cfg = dataclasses.replace(tcfg, loss_weights=weights, eval_train=False)
        params = ModelParams.init(cfg, seed=tcfg.seed, dtype=dtype)
        try:
            losses = train(params, samples, [], run_cfg).step_losses
        except NonFiniteLossError as exc:
            losses = [exc.value]
        out.append(PresetResult(name, weights, list(losses), window))
    return out


def format_presets(results: Sequence[PresetResult]) -> str:
    lines = [f"{'preset':<16} {'first20':>10} {'last20':>10}  status"]
    for r in results:
        w = r.window
        first = float(np.mean(r.losses[:w])) if r.losses else math.nan
        last = float(np.mean(r.losses[-w:])) if r.losses else math.nan
        status = "ok" if r.ok else ("non-finite" if not r.finite else "not decreasing")
        lines.append(f"{r.name:<16} {first:>10.5f} {last:>10.5f}  {status}")
    return "\n".join(lines)

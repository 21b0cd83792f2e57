"""Adam optimization loop, dataset splitting and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .data import Sample, stack_samples
from .losses import FOCAL_ALPHA, FOCAL_GAMMA, LossWeights, combined_loss
from .metrics import ConfusionCounts, MetricReport, confusion_counts
from .model import ModelParams, forward, forward_logits

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_dice", "val_iou", "wall_seconds", "train_dice")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}, step {step}")
        self.epoch, self.batch, self.step, self.value = epoch, batch, step, value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    learning_rate: float = 1e-5
    batch_size: int = 4
    loss_weights: LossWeights = LossWeights()
    focal_alpha: float = FOCAL_ALPHA
    focal_gamma: float = FOCAL_GAMMA
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    threshold: float = 0.5
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_train: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        check_fractions(self.split)
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when given")


def check_fractions(fractions: Sequence[float]) -> None:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"split needs three nonnegative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")


def split_dataset(dataset: Sequence, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[list, list, list]:
    """Seeded shuffle, then contiguous (train, test, validation) partitions.

    Test and validation get floor(n * f) items; train takes the remainder.
    """
    check_fractions(fractions)
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    n_test = math.floor(n * fractions[1])
    n_val = math.floor(n * fractions[2])
    n_train = n - n_test - n_val
    items = [dataset[i] for i in order]
    return items[:n_train], items[n_train:n_train + n_test], items[n_train + n_test:]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads: dict[str, np.ndarray | None], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` maps names to tensors (a :class:`ModelParams` works). Missing
    or ``None`` gradients count as zero.
    """
    items = params.tensors.items() if isinstance(params, ModelParams) else params.items()
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name, p in items:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        direction = (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data -= (lr * direction).astype(p.dtype, copy=False)
    return state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    val_iou: float
    wall_seconds: float
    train_dice: float

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.train_loss:.17g},{self.val_dice:.17g},{self.val_iou:.17g},"
                f"{self.wall_seconds:.3f},{self.train_dice:.17g}")


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_epoch: int
    best_score: float
    log: list[EpochRecord]
    adam: AdamState
    steps: int
    step_losses: list[float]
    best_step: int = 0


def predict_proba(params: ModelParams, images: np.ndarray, batch_size: int = 8,
                  trace: list | None = None) -> np.ndarray:
    """Inference-mode probabilities for an (N, 1, H, W) array."""
    out = []
    for start in range(0, len(images), batch_size):
        x = Tensor(np.asarray(images[start:start + batch_size], dtype=params.dtype))
        out.append(forward(x, params, training=False, trace=trace).data)
    return np.concatenate(out, axis=0)


def evaluate(params: ModelParams, samples: Sequence[Sample], threshold: float = 0.5,
             batch_size: int = 8) -> MetricReport:
    """Binarize predictions at ``threshold`` (>=) and micro-average counts."""
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    x, _ = stack_samples(samples, params.dtype)
    probs = predict_proba(params, x, batch_size)
    report = MetricReport(ConfusionCounts())
    for s, p in zip(samples, probs):
        report.add(s.id, confusion_counts(p[0] >= threshold, s.mask))
    return report


def _grads(params: ModelParams) -> dict[str, np.ndarray | None]:
    return {name: t.grad for name, t in params}


def train(params: ModelParams, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          cfg: TrainConfig, log_path=None, on_epoch: Callable[[EpochRecord], None] | None = None,
          adam: AdamState | None = None,
          until: Callable[[EpochRecord], bool] | None = None) -> TrainResult:
    """Mini-batch Adam on the combined loss; keeps the best-scoring snapshot.

    The snapshot score is validation Dice, or training Dice when there is no
    validation data. ``params`` is updated in place. ``until`` ends training
    after the first epoch whose record it accepts.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    x_all, y_all = stack_samples(train_samples, params.dtype)
    adam = adam or AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    log: list[EpochRecord] = []
    step_losses: list[float] = []
    best, best_epoch, best_score, best_step = params.copy(), -1, -math.inf, 0
    steps = 0
    if log_path is not None:
        Path(log_path).write_text(",".join(LOG_COLUMNS) + "\n")
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_samples))
        batch_losses = []
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            params.zero_grad()
            with Tape() as tape:
                logits = forward_logits(Tensor(x_all[idx]), params, training=True)
                loss = combined_loss(logits, y_all[idx], cfg.loss_weights, cfg.focal_alpha,
                                     cfg.focal_gamma, from_logits=True)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, b, steps, value)
            tape.backward(loss)
            adam_step(params, _grads(params), adam, cfg.learning_rate)
            steps += 1
            batch_losses.append(value)
            step_losses.append(value)
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val = evaluate(params, val_samples, cfg.threshold) if val_samples else None
        tr = evaluate(params, train_samples, cfg.threshold) if cfg.eval_train or val is None else None
        rec = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            val_dice=val.dice if val else math.nan,
            val_iou=val.iou if val else math.nan,
            wall_seconds=time.perf_counter() - start,
            train_dice=tr.dice if tr else math.nan,
        )
        log.append(rec)
        score = rec.val_dice if val else rec.train_dice
        if score > best_score:
            best, best_epoch, best_score, best_step = params.copy(), epoch, score, steps
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(rec.csv_row() + "\n")
        logger.info("epoch %d loss %.5f val_dice %.4f train_dice %.4f", epoch, rec.train_loss,
                    rec.val_dice, rec.train_dice)
        if on_epoch is not None:
            on_epoch(rec)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        if until is not None and until(rec):
            break
    return TrainResult(params, best, best_epoch, best_score, log, adam, steps, step_losses, best_step)

"""Dice, BCE and focal segmentation losses and their weighted combination.

Every loss accepts either probabilities or, with ``from_logits=True``,
raw logits (the training path, which avoids clamping and saturation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops

DICE_SMOOTH = 1e-6  # keeps empty-vs-empty finite without biasing the ratio
PROB_EPS = 1e-7
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the Dice, BCE and focal terms."""

    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 3.0
    lam: float = 1.0 / 3.0

    def __post_init__(self):
        ws = (self.alpha, self.beta, self.lam)
        if any(w < 0 or not math.isfinite(w) for w in ws):
            raise ValueError(f"loss weights must be finite and nonnegative, got {ws}")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.lam)


def _truth(truth, like: Tensor) -> np.ndarray:
    g = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if g.shape != like.shape:
        raise ValueError(f"prediction shape {like.shape} does not match truth shape {g.shape}")
    return g.astype(like.dtype, copy=False)


def _probs(pred: Tensor, from_logits: bool) -> Tensor:
    return ops.sigmoid(pred) if from_logits else pred


def dice_loss(pred: Tensor, truth, smooth: float = DICE_SMOOTH, from_logits: bool = False) -> Tensor:
    """(FP + FN + s) / (2 TP + FP + FN + s) on probability-weighted counts."""
    g = _truth(truth, pred)
    p = _probs(pred, from_logits)
    tp = (p * g).sum()
    fp = (p * (1.0 - g)).sum()
    fn = ((1.0 - p) * g).sum()
    return (fp + fn + smooth) / (tp * 2.0 + fp + fn + smooth)


def bce_loss(pred: Tensor, truth, from_logits: bool = False) -> Tensor:
    g = _truth(truth, pred)
    if from_logits:
        # -[g log s(z) + (1-g) log(1 - s(z))] = softplus(z) - g z
        return (ops.softplus(pred) - pred * g).mean()
    p = ops.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    return -(ops.log(p) * g + ops.log(1.0 - p) * (1.0 - g)).mean()


def focal_loss(pred: Tensor, truth, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA,
               from_logits: bool = False) -> Tensor:
    """-mean(alpha (1 - p_t)^gamma log p_t), p_t the probability of the true class."""
    if alpha <= 0:
        raise ValueError("focal alpha must be positive")
    if gamma < 0:
        raise ValueError("focal gamma must be nonnegative")
    g = _truth(truth, pred)
    if from_logits:
        z_t = pred * (2.0 * g - 1.0)
        log_pt = -ops.softplus(-z_t)
        miss = ops.sigmoid(-z_t)
    else:
        p = ops.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
        pt = p * g + (1.0 - p) * (1.0 - g)
        log_pt = ops.log(pt)
        miss = 1.0 - pt
    terms = log_pt if gamma == 0 else ops.power(miss, gamma) * log_pt
    return -(terms.mean() * alpha)


def combined_loss(pred: Tensor, truth, weights: LossWeights = LossWeights(),
                  focal_alpha: float = FOCAL_ALPHA, focal_gamma: float = FOCAL_GAMMA,
                  from_logits: bool = False) -> Tensor:
    """alpha * dice + beta * bce + lam * focal; zero-weight terms are skipped."""
    total = None
    if weights.alpha:
        total = dice_loss(pred, truth, from_logits=from_logits) * weights.alpha
    if weights.beta:
        term = bce_loss(pred, truth, from_logits=from_logits) * weights.beta
        total = term if total is None else total + term
    if weights.lam:
        term = focal_loss(pred, truth, focal_alpha, focal_gamma, from_logits=from_logits) * weights.lam
        total = term if total is None else total + term
    return total

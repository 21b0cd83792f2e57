"""Pixel confusion counts and the overlap metrics derived from them."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def empty(self) -> bool:
        """True when both prediction and truth have no foreground."""
        return self.tp + self.fp + self.fn == 0


def _binary(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be a binary map with values in {{0, 1}}")
        arr = arr.astype(bool)
    return arr


def confusion_counts(pred_mask, truth) -> ConfusionCounts:
    p = _binary(pred_mask, "prediction")
    g = _binary(truth, "truth")
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def iou(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); 1 when both masks are empty."""
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def dice_score(c: ConfusionCounts) -> float:
    """2 TP / (2 TP + FP + FN); 1 when both masks are empty."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


@dataclass
class MetricReport:
    """Micro-averaged dataset metrics plus one row per sample."""

    counts: ConfusionCounts
    rows: list[dict] = field(default_factory=list)

    @property
    def dice(self) -> float:
        return dice_score(self.counts)

    @property
    def iou(self) -> float:
        return iou(self.counts)

    @property
    def empty_samples(self) -> list[str]:
        return [r["sample_id"] for r in self.rows if r["empty"]]

    def add(self, sample_id: str, c: ConfusionCounts) -> None:
        self.counts = self.counts + c
        self.rows.append({"sample_id": sample_id, "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
                          "dice": dice_score(c), "iou": iou(c), "empty": c.empty})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_id", "tp", "fp", "fn", "tn", "dice", "iou"])
        for r in self.rows:
            writer.writerow([r["sample_id"], r["tp"], r["fp"], r["fn"], r["tn"],
                             f"{r['dice']:.10g}", f"{r['iou']:.10g}"])
        return buf.getvalue()

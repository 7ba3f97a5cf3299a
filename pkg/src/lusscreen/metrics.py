"""Classification and segmentation metrics with per-fold aggregation.

Rates whose denominator is zero are reported as ``None`` ("absent"), never 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import LABELS
from .errors import DataError

POSITIVE = "covid"
RATE_METRICS = ("accuracy", "sensitivity", "specificity", "mean_iou")


def _label(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return LABELS[int(value)]
    if value not in LABELS:
        raise DataError(f"unknown class {value!r}")
    return value


def _ratio(num, den):
    return num / den if den else None


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self):
        return _ratio(self.tp + self.tn, self.total)

    @property
    def sensitivity(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self):
        return _ratio(self.tn, self.tn + self.fp)

    def rates(self) -> dict:
        return {"accuracy": self.accuracy, "sensitivity": self.sensitivity, "specificity": self.specificity}

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def classification_metrics(preds, truths) -> ConfusionMatrix:
    """Confusion matrix with COVID as the positive class.

    Labels may be strings ("covid", "healthy") or class indices (0, 1).
    """
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise DataError(f"{len(preds)} predictions for {len(truths)} ground-truth labels")
    if not preds:
        raise DataError("no samples to score")
    tp = fp = tn = fn = 0
    for p, t in zip(preds, truths):
        p_pos = _label(p) == POSITIVE
        t_pos = _label(t) == POSITIVE
        if p_pos and t_pos:
            tp += 1
        elif p_pos:
            fp += 1
        elif t_pos:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, tn, fn)


def iou(pred_mask, true_mask) -> float:
    """Intersection over union of two binary masks (nonzero = set); both empty -> 1.0."""
    a = np.asarray(pred_mask) != 0
    b = np.asarray(true_mask) != 0
    if a.shape != b.shape:
        raise DataError(f"mask dims differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def threshold_mask(probabilities, threshold: float = 0.5) -> np.ndarray:
    """Probability map -> uint8 mask, 255 where p >= threshold.

    Accepts (H, W) or any shape with leading singleton axes, e.g. (1, 1, H, W).
    """
    p = np.asarray(probabilities)
    while p.ndim > 2 and p.shape[0] == 1:
        p = p[0]
    return np.where(p >= threshold, 255, 0).astype(np.uint8)


@dataclass
class FoldMetrics:
    fold: int
    confusion: ConfusionMatrix
    mean_iou: float | None = None
    n_masks: int = 0

    def rates(self) -> dict:
        return {**self.confusion.rates(), "mean_iou": self.mean_iou}

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            **self.rates(),
            "confusion": self.confusion.to_dict(),
            "n_samples": self.confusion.total,
            "n_masks": self.n_masks,
        }


@dataclass
class EvalReport:
    folds: list[FoldMetrics]
    aggregate: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": self.aggregate,
            "notes": list(self.notes),
        }


def _sample_std(values):
    if len(values) < 2:
        return None
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (len(values) - 1))


def aggregate(folds) -> EvalReport:
    """Unweighted mean and sample standard deviation of each rate across folds."""
    folds = list(folds)
    if not folds:
        raise DataError("cannot aggregate an empty list of folds")
    agg, notes = {}, []
    for metric in RATE_METRICS:
        values = [f.rates()[metric] for f in folds]
        present = [v for v in values if v is not None]
        if len(present) < len(values):
            skipped = [f.fold for f, v in zip(folds, values) if v is None]
            notes.append(f"{metric} undefined in fold(s) {skipped}; excluded from aggregate")
        if present:
            agg[metric] = {"mean": sum(present) / len(present), "std": _sample_std(present), "n": len(present)}
        else:
            agg[metric] = {"mean": None, "std": None, "n": 0}
    return EvalReport(folds, agg, notes)

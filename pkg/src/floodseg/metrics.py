"""Aggregate intersection-over-union over a whole evaluation set."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return asdict(self)


def _binary(mask: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(mask)
    vals = np.unique(m)
    if vals.size and not (set(vals.tolist()) <= {0, 1} or set(vals.tolist()) <= {0, 255}):
        raise DataError(f"{name} mask is not binary (values {vals[:5].tolist()})")
    return m > 0


def accumulate(counts: ConfusionCounts, pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Add the pixel counts of one image. Masks may be 0/1 or 0/255."""
    if np.shape(pred) != np.shape(gt):
        raise ShapeError(f"prediction {np.shape(pred)} and ground truth {np.shape(gt)} differ in size")
    p = _binary(pred, "prediction")
    g = _binary(gt, "ground-truth")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size) - tp - fp - fn
    return counts + ConfusionCounts(tp, fp, fn, tn)


def iou(counts: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); 1.0 when nothing is flooded in either mask."""
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return counts.tp / denom


def dataset_iou(preds, gts) -> float:
    c = ConfusionCounts()
    for p, g in zip(preds, gts):
        c = accumulate(c, p, g)
    return iou(c)

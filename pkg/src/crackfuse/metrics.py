"""Binary-segmentation evaluation.

Confusion counts, the six benchmark metrics (dice, iou, accuracy,
precision, specificity, recall), and a skeleton-overlap topology score
computed with the same similarity the topology loss optimizes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, UsageError
from .losses import RANGE_TOL, topology_loss
from .tensor import Tensor, no_grad

__all__ = ["MetricsReport", "confusion", "compute_metrics", "cl_dice_score",
           "evaluate_pair", "aggregate"]


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    dice: float
    iou: float
    accuracy: float
    precision: float
    specificity: float
    recall: float
    cl_dice: float
    mode: str = "single"
    threshold: float = 0.5

    def to_json(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "dice": self.dice, "iou": self.iou, "accuracy": self.accuracy,
            "precision": self.precision, "specificity": self.specificity,
            "recall": self.recall, "cl_dice": self.cl_dice,
            "mode": self.mode, "threshold": self.threshold,
        }


def _as_map(x, name: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be 2-D or 3-D, got {arr.shape}")
    return arr


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")


def confusion(pred, gt, threshold: float = 0.5):
    """Pixel counts (tp, fp, tn, fn) of pred binarized at >= threshold."""
    _check_threshold(threshold)
    p = _as_map(pred, "pred")
    g = _as_map(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    if p.min() < -RANGE_TOL or p.max() > 1.0 + RANGE_TOL:
        raise DomainError("pred values must lie in [0, 1]")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise DomainError("gt must be strictly binary")
    pb = p >= threshold
    gb = g == 1.0
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    tn = int(np.count_nonzero(~pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    return tp, fp, tn, fn


def _div(num: float, den: float, both_empty: bool) -> float:
    # degenerate denominators: perfect when the compared sets are both
    # empty, zero otherwise
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def _six_from_counts(tp, fp, tn, fn):
    total = tp + fp + tn + fn
    return {
        "dice": _div(2 * tp, 2 * tp + fp + fn, fp + fn == 0),
        "iou": _div(tp, tp + fp + fn, fp + fn == 0),
        "accuracy": _div(tp + tn, total, True),
        "precision": _div(tp, tp + fp, fn == 0),
        "specificity": _div(tn, tn + fp, fn == 0),
        "recall": _div(tp, tp + fn, fp == 0),
    }


def cl_dice_score(pred, gt, threshold: float = 0.5,
                  iterations: int = 10) -> float:
    """Harmonic skeleton-overlap similarity of the binarized pair."""
    _check_threshold(threshold)
    p = _as_map(pred, "pred")
    g = _as_map(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    pb = (p >= threshold).astype(np.float32)
    gb = g.astype(np.float32)
    with no_grad():
        loss = topology_loss(Tensor(gb), Tensor(pb), iterations=iterations)
    return float(1.0 - loss.data)


def compute_metrics(conf, pred, gt, threshold: float = 0.5,
                    mode: str = "single") -> MetricsReport:
    """Build a report from confusion counts plus the maps for cl_dice."""
    tp, fp, tn, fn = (int(c) for c in conf)
    if min(tp, fp, tn, fn) < 0:
        raise UsageError("confusion counts must be non-negative")
    six = _six_from_counts(tp, fp, tn, fn)
    score = cl_dice_score(pred, gt, threshold=threshold)
    return MetricsReport(tp=tp, fp=fp, tn=tn, fn=fn, cl_dice=score,
                         mode=mode, threshold=threshold, **six)


def evaluate_pair(pred, gt, threshold: float = 0.5) -> MetricsReport:
    conf = confusion(pred, gt, threshold)
    return compute_metrics(conf, pred, gt, threshold=threshold)


def aggregate(reports, mode: str = "micro") -> MetricsReport:
    """Combine per-image reports.

    micro sums confusion counts and recomputes the six metrics from the
    pooled counts; macro averages the per-image metric values instead.
    cl_dice is a per-image mean in both modes (skeletons of pooled pixel
    counts are not defined). Counts are summed either way, so macro
    metric values are averages, not functions of the stored counts.
    """
    reports = list(reports)
    if not reports:
        raise UsageError("aggregate needs at least one report")
    if mode not in ("micro", "macro"):
        raise ConfigError(f"mode must be micro or macro, got {mode!r}")
    thresholds = {r.threshold for r in reports}
    if len(thresholds) > 1:
        raise UsageError("cannot aggregate reports with mixed thresholds")
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    tn = sum(r.tn for r in reports)
    fn = sum(r.fn for r in reports)
    names = ("dice", "iou", "accuracy", "precision", "specificity", "recall")
    if mode == "micro":
        six = _six_from_counts(tp, fp, tn, fn)
    else:
        six = {k: sum(getattr(r, k) for r in reports) / len(reports)
               for k in names}
    score = sum(r.cl_dice for r in reports) / len(reports)
    return MetricsReport(tp=tp, fp=fp, tn=tn, fn=fn, cl_dice=score,
                         mode=mode, threshold=thresholds.pop(), **six)

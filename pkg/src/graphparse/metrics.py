"""Confusion-matrix metrics: pixel/mean accuracy, IoU, F-1, hierarchy consistency.

Counts are exact int64; every ratio is computed in float64 from them, so
per-image matrices may be merged in any order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, UsageError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""
    counts: np.ndarray

    @classmethod
    def empty(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise DataError(f"cannot merge confusion matrices with K={self.k} and K={other.k}")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred_mask, gt_mask) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one prediction/ground-truth pair."""
    pred = np.asarray(pred_mask).astype(np.int64).ravel()
    gt = np.asarray(gt_mask).astype(np.int64).ravel()
    if np.shape(pred_mask) != np.shape(gt_mask):
        raise DataError(f"mask shapes differ: {np.shape(pred_mask)} vs {np.shape(gt_mask)}")
    k = cm.k
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if m.size and (m.min() < 0 or m.max() >= k):
            raise DataError(f"{name} mask has labels outside [0, {k})")
    counts = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + counts)


def compute(cm: ConfusionMatrix, f1_foreground_only: bool = True,
            exclude_background: bool = False) -> Dict[str, object]:
    """All summary measures.

    Means skip classes absent from the ground truth; ``mean_f1`` also skips
    background unless ``f1_foreground_only`` is False, and
    ``exclude_background`` drops class 0 from the IoU/accuracy means.
    """
    if cm.total == 0:
        raise UsageError("cannot compute metrics from an empty confusion matrix")
    c = cm.counts.astype(np.int64)
    diag = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    union = rows + cols - diag
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(rows > 0, diag / np.where(rows > 0, rows, 1), np.nan)
        iou = np.where(union > 0, diag / np.where(union > 0, union, 1), np.nan)
        f1 = np.where(rows + cols > 0, 2 * diag / np.where(rows + cols > 0, rows + cols, 1), np.nan)
    present = rows > 0
    mean_mask = present.copy()
    if exclude_background:
        mean_mask[0] = False
    f1_mask = present.copy()
    if f1_foreground_only:
        f1_mask[0] = False

    def _mean(v, m):
        return float(v[m].mean()) if m.any() else float("nan")

    return {
        "pixel_acc": float(diag.sum() / c.sum()),
        "mean_acc": _mean(acc, mean_mask),
        "iou": iou,
        "mean_iou": _mean(iou, mean_mask),
        "acc": acc,
        "f1": f1,
        "mean_f1": _mean(f1, f1_mask),
    }


def hierarchy_consistency(fine_pred, coarse_pred, mapping) -> float:
    """Fraction of pixels where ``mapping[fine_pred] == coarse_pred``.

    ``mapping`` is an index lookup table (sequence or array) fine -> coarse.
    """
    fine = np.asarray(fine_pred).astype(np.int64)
    coarse = np.asarray(coarse_pred).astype(np.int64)
    if fine.shape != coarse.shape:
        raise DataError(f"mask shapes differ: {fine.shape} vs {coarse.shape}")
    lut = np.asarray(mapping, dtype=np.int64)
    if fine.size == 0:
        raise DataError("empty masks")
    return float(np.mean(lut[fine] == coarse))


def format_report(results: Mapping[str, object], labels: Optional[Sequence[str]] = None,
                  title: str = "") -> str:
    """Human-readable table of per-class and mean measures."""
    iou, acc, f1 = results["iou"], results["acc"], results["f1"]
    labels = labels or [str(i) for i in range(len(iou))]
    width = max(12, max(len(x) for x in labels) + 2)
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'class':<{width}}{'acc':>8}{'iou':>8}{'f1':>8}")
    for name, a, i, f in zip(labels, acc, iou, f1):
        lines.append(f"{name:<{width}}{_pct(a):>8}{_pct(i):>8}{_pct(f):>8}")
    lines.append(f"pixel_acc {_pct(results['pixel_acc'])}  mean_acc {_pct(results['mean_acc'])}  "
                 f"mean_iou {_pct(results['mean_iou'])}  mean_f1 {_pct(results['mean_f1'])}")
    return "\n".join(lines) + "\n"


def _pct(x) -> str:
    return "-" if x is None or np.isnan(x) else f"{100 * x:.2f}"


def format_lines(results: Mapping[str, object], labels: Optional[Sequence[str]] = None) -> str:
    """Machine-readable ``metric<TAB>class<TAB>value`` lines (class ``*`` for summaries)."""
    out = []
    for key in ("pixel_acc", "mean_acc", "mean_iou", "mean_f1"):
        out.append(f"{key}\t*\t{results[key]!r}")
    labels = labels or [str(i) for i in range(len(results["iou"]))]
    for key in ("acc", "iou", "f1"):
        for name, v in zip(labels, results[key]):
            out.append(f"{key}\t{name}\t{float(v)!r}")
    return "\n".join(out) + "\n"

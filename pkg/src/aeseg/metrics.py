"""Confusion matrix, per-class IoU and mean IoU with ignore handling."""

from __future__ import annotations

import json

import numpy as np

from .fusion import IGNORE


class ConfusionMatrix:
    """Pixel counts, rows = ground truth, columns = prediction.

    Pixels whose ground truth is IGNORE are skipped. Predicted IGNORE is an
    error unless ``allow_ignored_pred`` is set (scoring fused masks), in
    which case those pixels are tallied in ``ignored_pred`` instead.
    """

    def __init__(self, n_labels: int):
        self.n_labels = n_labels
        self.counts = np.zeros((n_labels, n_labels), np.int64)
        self.ignored_pred = 0

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, allow_ignored_pred: bool = False):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
        valid = gt != IGNORE
        p_ign = pred == IGNORE
        if (p_ign & valid).any():
            if not allow_ignored_pred:
                raise ValueError("prediction contains IGNORE pixels")
            self.ignored_pred += int((p_ign & valid).sum())
        keep = valid & ~p_ign
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.max() >= self.n_labels or p.max() >= self.n_labels):
            raise ValueError(f"labels exceed the {self.n_labels} classes of this matrix")
        self.counts += np.bincount(g * self.n_labels + p, minlength=self.n_labels ** 2).reshape(
            self.n_labels, self.n_labels)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.n_labels)
        out.counts = self.counts + other.counts
        out.ignored_pred = self.ignored_pred + other.ignored_pred
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def coverage(self) -> float:
        """Share of evaluated pixels that the prediction labelled."""
        n = self.total + self.ignored_pred
        return self.total / n if n else 0.0


def accumulate(confusion: ConfusionMatrix, pred, gt, allow_ignored_pred: bool = False) -> ConfusionMatrix:
    return confusion.accumulate(pred, gt, allow_ignored_pred)


def miou(confusion: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both GT and prediction) and their mean."""
    c = confusion.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    iou = np.full(len(tp), np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    mean = float(np.mean(iou[present])) if present.any() else float("nan")
    return iou, mean


def evaluate(preds, gts, n_labels: int, allow_ignored_pred: bool = False) -> ConfusionMatrix:
    cm = ConfusionMatrix(n_labels)
    for p, g in zip(preds, gts):
        cm.accumulate(p, g, allow_ignored_pred)
    return cm


def report(confusion: ConfusionMatrix, class_names=None) -> dict:
    iou, mean = miou(confusion)
    names = class_names or ["background"] + [f"class_{i}" for i in range(1, confusion.n_labels)]
    return {
        "mean_iou": mean,
        "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, iou)},
        "coverage": confusion.coverage(),
        "pixels_evaluated": confusion.total,
        "pixels_ignored_in_prediction": confusion.ignored_pred,
    }


def format_table(rep: dict) -> str:
    rows = [(name, "absent" if v is None else f"{100 * v:6.2f}") for name, v in rep["per_class_iou"].items()]
    rows.append(("mIoU", f"{100 * rep['mean_iou']:6.2f}"))
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{n:<{width}}  {v}" for n, v in rows)


def dumps(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=True)

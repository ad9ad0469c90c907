"""Evaluation metrics: confusion matrix, per-class and mean IoU, RMSE."""

from __future__ import annotations

import math

import numpy as np

from .losses import IGNORE_LABEL


class ConfusionMatrix:
    """K x K pixel counts; ``counts[i, j]`` = true class i+1 predicted as j+1."""

    def __init__(self, n_classes: int):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64).ravel()
        gt = np.asarray(gt, dtype=np.int64).ravel()
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth differ in size")
        keep = gt != IGNORE_LABEL
        pred, gt = pred[keep], gt[keep]
        k = self.n_classes
        if gt.size and (gt.min() < 1 or gt.max() > k or pred.min() < 1 or pred.max() > k):
            raise ValueError(f"labels must lie in 1..{k}")
        self.counts += np.bincount((gt - 1) * k + (pred - 1), minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("class counts differ")
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_maps(cls, pred, gt, n_classes: int) -> "ConfusionMatrix":
        return cls(n_classes).update(pred, gt)


def iou(conf: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class is absent from both maps) and their mean."""
    if conf.total == 0:
        raise ValueError("confusion matrix is empty")
    c = conf.counts
    inter = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - inter
    per_class = np.full(conf.n_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    vals = per_class[present].tolist()
    return per_class, math.fsum(vals) / len(vals)


def rmse(pred, gt, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in shape")
    r = (pred - gt).ravel()
    if mask is not None:
        r = r[np.asarray(mask, dtype=bool).ravel()]
    if r.size == 0:
        raise ValueError("no valid pixels")
    return math.sqrt(math.fsum((r * r).tolist()) / r.size)

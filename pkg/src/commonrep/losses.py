"""Training objectives: pixel-wise cross-entropy, depth regression losses and
the combined end-to-end objective."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Variable, as_variable

IGNORE_LABEL = 0


class EmptyMaskWarning(UserWarning):
    """A loss was asked to average over zero pixels."""


@dataclass
class LossWeights:
    rec: float = 1.0  # weight of the reconstruction term
    corr: float = 0.0  # weight of the (subtracted) view correlation
    si: float = 0.5  # balance of the scale-invariant depth loss

    def __post_init__(self):
        if self.rec < 0 or self.corr < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.si <= 1.0:
            raise ValueError("scale-invariant balance must lie in [0, 1]")


def _batched(x: Variable, rank: int) -> Variable:
    return ops.reshape(x, (1,) + x.shape) if x.ndim == rank else x


def cross_entropy_loss(logits, labels) -> Variable:
    """Mean over labelled pixels of -log softmax(logits)[label].

    ``labels`` take values 1..K, with 0 marking ignored pixels.  Accepts
    ``K x H x W`` or ``N x K x H x W`` logits.
    """
    logits = _batched(as_variable(logits), 3)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if not np.any(labels != IGNORE_LABEL):
        warnings.warn("every pixel is ignore-marked; loss defined as 0", EmptyMaskWarning, stacklevel=2)
    return ops.softmax_cross_entropy(logits, labels)


def _mask_weights(shape, mask) -> tuple[np.ndarray, int]:
    if mask is None:
        return np.ones(shape), int(np.prod(shape))
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    return m.astype(np.float64), int(m.sum())


def _masked_mean(x: Variable, mask) -> Variable:
    w, n = _mask_weights(x.shape, mask)
    if n == 0:
        warnings.warn("depth loss over an empty mask; defined as 0", EmptyMaskWarning, stacklevel=3)
        return ops.scale(ops.sum(x), 0.0)
    if mask is None:
        return ops.mean(x)
    return ops.scale(ops.sum(ops.mul(x, w)), 1.0 / n)


def smooth_l1_loss(pred, gt, mask=None) -> Variable:
    """Mean of D(pred - gt) over (masked) pixels."""
    pred = as_variable(pred)
    return _masked_mean(ops.smooth_l1(ops.sub(pred, np.asarray(gt, dtype=np.float64))), mask)


def l2_loss(pred, gt, mask=None) -> Variable:
    pred = as_variable(pred)
    return _masked_mean(ops.square(ops.sub(pred, np.asarray(gt, dtype=np.float64))), mask)


def scale_invariant_loss(pred, gt, mask=None, balance: float = 0.5) -> Variable:
    """mean(e^2) - balance * mean(e)^2 with e = log pred - log gt."""
    pred = as_variable(pred)
    gt = np.asarray(gt, dtype=np.float64)
    w, n = _mask_weights(pred.shape, mask)
    bad = np.argwhere((pred.value <= 0) & (w > 0))
    if bad.size:
        raise ValueError(f"scale_invariant_loss: non-positive prediction at pixel {tuple(int(i) for i in bad[0])}")
    bad = np.argwhere((gt <= 0) & (w > 0))
    if bad.size:
        raise ValueError(f"scale_invariant_loss: non-positive ground truth at pixel {tuple(int(i) for i in bad[0])}")
    # masked-out pixels are replaced by 1 so their log is 0
    safe_gt = np.where(w > 0, gt, 1.0)
    safe_pred = ops.add(ops.mul(pred, w), 1.0 - w)
    e = ops.sub(ops.log(safe_pred), np.log(safe_gt))
    if n == 0:
        warnings.warn("depth loss over an empty mask; defined as 0", EmptyMaskWarning, stacklevel=2)
        return ops.scale(ops.sum(e), 0.0)
    mean_sq = ops.scale(ops.sum(ops.square(e)), 1.0 / n)
    mean_e = ops.scale(ops.sum(e), 1.0 / n)
    return ops.sub(mean_sq, ops.scale(ops.square(mean_e), balance))


DEPTH_LOSSES = {
    "smooth-l1": smooth_l1_loss,
    "l2": l2_loss,
    "scale-invariant": scale_invariant_loss,
}


def depth_loss(kind: str, pred, gt, mask=None, balance: float = 0.5) -> Variable:
    if kind not in DEPTH_LOSSES:
        raise ValueError(f"unknown depth loss {kind!r}; choose from {sorted(DEPTH_LOSSES)}")
    if kind == "scale-invariant":
        return scale_invariant_loss(pred, gt, mask, balance=balance)
    return DEPTH_LOSSES[kind](pred, gt, mask)


def total_objective(l_ss_rgb, l_d, l_rec, corr, weights: LossWeights) -> Variable:
    """L_ss_rgb + L_d + rec * L_rec - corr_weight * corr."""
    total = ops.add(as_variable(l_ss_rgb), as_variable(l_d))
    total = ops.add(total, ops.scale(as_variable(l_rec), weights.rec))
    if weights.corr:
        total = ops.sub(total, ops.scale(as_variable(corr), weights.corr))
    return total


def total_objective_value(l_ss_rgb: float, l_d: float, l_rec: float, corr: float, weights: LossWeights) -> float:
    """Plain-float recomputation, used to audit logged totals."""
    total = l_ss_rgb + l_d + weights.rec * l_rec
    if weights.corr:
        total -= weights.corr * corr
    return total

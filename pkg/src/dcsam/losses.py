"""Segmentation losses over probability maps.

Both losses take a prediction in (0, 1) and a binary target of the same
shape and reduce to a scalar. The combined loss is their plain sum.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor, as_tensor

CLAMP_LO = 1e-7
CLAMP_HI = 1.0 - 1e-7
DICE_EPS = 1e-6


def _check_pair(pred: Tensor, target: Tensor, op: str) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{op}: prediction {pred.shape} vs target {target.shape}")
    if not np.isin(target.data, (0.0, 1.0)).all():
        raise ValueError(f"{op}: target must be binary")


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7]."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target, "bce_loss")
    p = T.clamp(pred, CLAMP_LO, CLAMP_HI)
    y = Tensor(target.data)
    one_minus_y = Tensor(1.0 - target.data)
    pos_term = T.mul(T.log(p), y)
    neg_term = T.mul(T.log(T.add_scalar(T.neg(p), 1.0)), one_minus_y)
    total = T.sum_all(T.add(pos_term, neg_term))
    return T.scale(total, -1.0 / pred.size)


def dice_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Soft Dice: 1 - 2*sum(p*y) / (sum(p^2) + sum(y^2) + eps)."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target, "dice_loss")
    y = Tensor(target.data)
    inter = T.sum_all(T.mul(pred, y))
    pred_sq = T.sum_all(T.mul(pred, pred))
    target_sq = float((target.data ** 2).sum())
    denom = T.add_scalar(pred_sq, target_sq + DICE_EPS)
    return T.add_scalar(T.neg(T.div(T.scale(inter, 2.0), denom)), 1.0)


def total_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Sum of BCE and Dice, exactly."""
    return T.add(bce_loss(pred, target), dice_loss(pred, target))

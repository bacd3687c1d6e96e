"""Cyclic-consistent cross-attention.

The bias construction walks each support position through a query-and-back
round trip over the affinity matrix: support position j picks its strongest
query i*, i* picks its strongest support position j*, and j stays visible
only when j and j* carry the same mask label. Inconsistent positions are
masked with the -inf sentinel, so their attention weight is exactly zero.

The round trip is an argmax chain, piecewise constant in the inputs, so the
bias is detached: no gradient flows through it, only through the affinity
logits themselves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionBlock:
    """Projection weights of one single-head attention block."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    n_heads = 1

    def __post_init__(self):
        d = self.wq.shape
        if len(d) != 2 or d[0] != d[1]:
            raise ShapeMismatch(f"wq must be square, got {d}")
        if self.wk.shape != d or self.wv.shape != d:
            raise ShapeMismatch("projection weights must share one square shape")

    @property
    def width(self) -> int:
        return self.wq.shape[0]


@dataclass(frozen=True)
class CycleBias:
    """Additive attention bias over support positions: 0 or -inf per column."""

    values: Tensor  # 1-D [HW], neg_inf_ok

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ShapeMismatch(f"cycle bias must be 1-D, got {self.values.shape}")


def affinity(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot-product affinity: [N, d] x [HW, d] -> [N, HW]."""
    if q.ndim != 2 or k.ndim != 2:
        raise ShapeMismatch(f"affinity needs 2-D operands, got {q.shape} and {k.shape}")
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"affinity: widths differ ({q.shape} vs {k.shape})")
    return T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[1]))


def _validate_flat_mask(mask: Tensor, hw: int, op: str) -> np.ndarray:
    if mask.ndim != 1 or mask.shape[0] != hw:
        raise ShapeMismatch(f"{op}: mask shape {mask.shape} does not match {hw} positions")
    m = mask.data
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError(f"{op}: mask must be binary")
    return m


def cycle_bias(a: Tensor, mask: Tensor) -> CycleBias:
    """Round-trip consistency bias for an affinity matrix ``a`` of [N, HW].

    For support position j: i* = argmax_i a[i, j], then j* = argmax_j' a[i*, j'];
    bias[j] is 0 when mask[j] == mask[j*], else -inf. Ties break toward the
    smallest index. Detached by construction (operates on raw values).
    """
    if a.ndim != 2:
        raise ShapeMismatch(f"cycle_bias needs a 2-D affinity, got {a.shape}")
    n, hw = a.shape
    m = _validate_flat_mask(mask, hw, "cycle_bias")
    vals = a.data
    i_star = np.argmax(vals, axis=0)          # per support position, first max
    row_best = np.argmax(vals, axis=1)        # per query, first max
    j_star = row_best[i_star]
    bias = np.where(m == m[j_star], 0.0, -np.inf)
    return CycleBias(values=Tensor(bias, neg_inf_ok=True))


def cross_attention(block: AttentionBlock, queries: Tensor, feats: Tensor,
                    bias: CycleBias | None = None) -> Tensor:
    """Project, score, softmax (optionally biased), and aggregate values.

    queries: [N, d]; feats: [HW, d]; result: [N, d].
    """
    if queries.ndim != 2 or feats.ndim != 2:
        raise ShapeMismatch(f"attention needs 2-D operands, got {queries.shape} and {feats.shape}")
    if queries.shape[1] != block.width or feats.shape[1] != block.width:
        raise ShapeMismatch(
            f"attention width {block.width} does not match inputs {queries.shape}, {feats.shape}")
    q = T.matmul(queries, block.wq)
    k = T.matmul(feats, block.wk)
    v = T.matmul(feats, block.wv)
    scores = affinity(q, k)
    bias_values = bias.values if bias is not None else T.zeros((feats.shape[0],))
    weights = T.masked_softmax_rows(scores, bias_values)
    return T.matmul(weights, v)


def cycle_consistent_attention(block: AttentionBlock, queries: Tensor, feats: Tensor,
                               mask: Tensor) -> Tensor:
    """Cross-attention with the round-trip consistency bias of ``mask``.

    With an all-equal mask the bias is all zeros and this reduces exactly to
    unbiased cross-attention. An all-inconsistent bias makes every softmax
    row empty and raises AllMasked.
    """
    if queries.ndim != 2 or feats.ndim != 2:
        raise ShapeMismatch(f"attention needs 2-D operands, got {queries.shape} and {feats.shape}")
    if queries.shape[1] != block.width or feats.shape[1] != block.width:
        raise ShapeMismatch(
            f"attention width {block.width} does not match inputs {queries.shape}, {feats.shape}")
    q = T.matmul(queries, block.wq)
    k = T.matmul(feats, block.wk)
    v = T.matmul(feats, block.wv)
    scores = affinity(q, k)
    bias = cycle_bias(scores, mask)
    weights = T.masked_softmax_rows(scores, bias.values)
    return T.matmul(weights, v)


def self_attention(block: AttentionBlock, queries: Tensor) -> Tensor:
    """Unbiased attention of a prompt set over itself: [N, d] -> [N, d]."""
    return cross_attention(block, queries, queries, bias=None)

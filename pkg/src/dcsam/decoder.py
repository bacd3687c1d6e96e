"""Parameter-free similarity decoder.

Scores each feature-map position against the labeled prompts of a branch
with a temperature-smoothed maximum (logsumexp), then squashes the positive
and negative branch difference:

    s+(p) = tau * logsumexp_i(<pos_i, f_p> / tau)
    s-(p) = tau * logsumexp_i(<neg_i, f_p> / tau)
    out(p) = sigmoid(s+(p) - s-(p))

With the negative branch disabled (no negative prompts) the logit is s+
alone, thresholding at zero score.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class DecoderConfig:
    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ShapeMismatch(f"tau must be positive, got {self.tau}")


def _branch_score(prompts: Tensor, flat_feats: Tensor, tau: float) -> Tensor:
    scores = T.matmul(prompts, flat_feats)            # [N, HW]
    return T.scale(T.logsumexp0(T.scale(scores, 1.0 / tau)), tau)


def decode(pos_labeled: Tensor, neg_labeled: Tensor | None, feats: Tensor,
           cfg: DecoderConfig = DecoderConfig()) -> Tensor:
    """Decode labeled prompts against a feature map [d, H, W] into [H, W] probabilities."""
    if feats.ndim != 3:
        raise ShapeMismatch(f"decoder features must be [d, H, W], got {feats.shape}")
    d, h, w = feats.shape
    if pos_labeled.ndim != 2 or pos_labeled.shape[1] != d:
        raise ShapeMismatch(f"positive prompts {pos_labeled.shape} do not match feature width {d}")
    if neg_labeled is not None and (neg_labeled.ndim != 2 or neg_labeled.shape[1] != d):
        raise ShapeMismatch(f"negative prompts {neg_labeled.shape} do not match feature width {d}")
    flat = T.reshape(feats, (d, h * w))
    logit = _branch_score(pos_labeled, flat, cfg.tau)
    if neg_labeled is not None:
        logit = T.sub(logit, _branch_score(neg_labeled, flat, cfg.tau))
    return T.reshape(T.sigmoid(logit), (h, w))

"""Region and boundary quality metrics.

All metrics operate on binary masks at the data level; nothing here is
differentiable. Empty-versus-empty comparisons count as perfect agreement.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyReport, FrameCountMismatch, ShapeMismatch
from .tensor import Tensor
from .util import atomic_write_text


def _as_mask(x, op: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{op}: masks must be 2-D, got {arr.shape}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError(f"{op}: masks must be binary")
    return arr.astype(bool)


def iou(pred, gt) -> float:
    """Intersection over union; two empty masks agree perfectly (1.0)."""
    p = _as_mask(pred, "iou")
    g = _as_mask(gt, "iou")
    if p.shape != g.shape:
        raise ShapeMismatch(f"iou: shapes {p.shape} and {g.shape} differ")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def miou(per_class_iou: Mapping[int, float]) -> float:
    """Mean of per-class IoU values."""
    if not per_class_iou:
        raise EmptyReport("miou over zero classes")
    return float(sum(per_class_iou.values()) / len(per_class_iou))


def default_boundary_tol(shape: tuple[int, int]) -> int:
    """Chebyshev match tolerance: ceil of 0.8% of the image diagonal."""
    h, w = shape
    return int(math.ceil(0.008 * math.hypot(h, w)))


def boundary_pixels(mask) -> np.ndarray:
    """1-pixel boundary under 4-connectivity; the image border counts as outside."""
    m = _as_mask(mask, "boundary_pixels")
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    up = padded[:-2, 1:-1]
    down = padded[2:, 1:-1]
    left = padded[1:-1, :-2]
    right = padded[1:-1, 2:]
    return m & ~(up & down & left & right)


def _dilate_chebyshev(b: np.ndarray, tol: int) -> np.ndarray:
    if tol == 0:
        return b
    h, w = b.shape
    out = np.zeros_like(b)
    for dr in range(-tol, tol + 1):
        for dc in range(-tol, tol + 1):
            src_r = slice(max(0, -dr), h - max(0, dr))
            dst_r = slice(max(0, dr), h - max(0, -dr))
            src_c = slice(max(0, -dc), w - max(0, dc))
            dst_c = slice(max(0, dc), w - max(0, -dc))
            out[dst_r, dst_c] |= b[src_r, src_c]
    return out


def boundary_f(pred, gt, tol: int | None = None) -> float:
    """Boundary F-measure with bipartite matching within a Chebyshev tolerance.

    Precision is the fraction of predicted boundary pixels within ``tol`` of
    the reference boundary; recall is symmetric; F is their harmonic mean.
    Two boundary-free masks score 1; exactly one boundary-free mask scores 0.
    """
    p = _as_mask(pred, "boundary_f")
    g = _as_mask(gt, "boundary_f")
    if p.shape != g.shape:
        raise ShapeMismatch(f"boundary_f: shapes {p.shape} and {g.shape} differ")
    if tol is None:
        tol = default_boundary_tol(p.shape)
    if tol < 0:
        raise ValueError(f"boundary_f: tolerance must be non-negative, got {tol}")
    pb = boundary_pixels(p)
    gb = boundary_pixels(g)
    np_count, ng_count = pb.sum(), gb.sum()
    if np_count == 0 and ng_count == 0:
        return 1.0
    if np_count == 0 or ng_count == 0:
        return 0.0
    precision = float((pb & _dilate_chebyshev(gb, tol)).sum() / np_count)
    recall = float((gb & _dilate_chebyshev(pb, tol)).sum() / ng_count)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MetricReport:
    """Evaluation summary.

    ``per_class_iou`` may be empty (single-instance tube scoring); when it is
    non-empty, ``miou`` is its mean. ``jf`` is always the arithmetic mean of
    ``j`` and ``f``.
    """

    per_class_iou: dict[int, float] = field(default_factory=dict)
    miou: float = 0.0
    j: float = 0.0
    f: float = 0.0
    jf: float = 0.0

    def __post_init__(self):
        if self.per_class_iou:
            expect = sum(self.per_class_iou.values()) / len(self.per_class_iou)
            if abs(self.miou - expect) > 1e-12:
                raise ValueError("miou must be the mean of per_class_iou")
        if abs(self.jf - 0.5 * (self.j + self.f)) > 1e-12:
            raise ValueError("jf must be the mean of j and f")

    @classmethod
    def from_classes(cls, per_class_iou: Mapping[int, float], j: float, f: float) -> "MetricReport":
        per_class = dict(per_class_iou)
        return cls(per_class_iou=per_class, miou=miou(per_class), j=j, f=f, jf=0.5 * (j + f))

    @classmethod
    def from_tube(cls, j: float, f: float) -> "MetricReport":
        # A tube scores one instance; there is no class map, miou mirrors J.
        return cls(per_class_iou={}, miou=j, j=j, f=f, jf=0.5 * (j + f))


def jf_score(tube_pred, tube_gt, tol: int | None = None) -> MetricReport:
    """J&F for a pair of mask tubes: J is the mean per-frame IoU, F the mean
    per-frame boundary F-measure, J&F their arithmetic mean."""
    pred_masks = getattr(tube_pred, "masks", tube_pred)
    gt_masks = getattr(tube_gt, "masks", tube_gt)
    if len(pred_masks) != len(gt_masks):
        raise FrameCountMismatch(f"tubes have {len(pred_masks)} and {len(gt_masks)} frames")
    if len(pred_masks) == 0:
        raise EmptyReport("jf_score over zero frames")
    js = [iou(p, g) for p, g in zip(pred_masks, gt_masks)]
    fs = [boundary_f(p, g, tol) for p, g in zip(pred_masks, gt_masks)]
    return MetricReport.from_tube(j=float(np.mean(js)), f=float(np.mean(fs)))


def report_csv_text(fold: int, report: MetricReport) -> str:
    lines = ["fold,class_id,iou"]
    for class_id in sorted(report.per_class_iou):
        lines.append(f"{fold},{class_id},{report.per_class_iou[class_id]!r}")
    lines.append(
        f"# summary fold={fold} miou={report.miou!r} j={report.j!r} f={report.f!r} jf={report.jf!r}")
    return "\n".join(lines) + "\n"


def write_report(path: str | Path, fold: int, report: MetricReport) -> None:
    """Emit the per-class CSV plus a JSON summary sidecar, both atomically."""
    if not report.per_class_iou:
        raise EmptyReport("report has no per-class rows")
    path = Path(path)
    atomic_write_text(path, report_csv_text(fold, report))
    summary = {"fold": fold, "miou": report.miou, "j": report.j, "f": report.f, "jf": report.jf}
    atomic_write_text(path.with_suffix(".json"), json.dumps(summary, indent=2) + "\n")

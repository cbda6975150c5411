"""Region similarity (J), boundary accuracy (F) and their mean (G)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import DimensionError, UsageError

_FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)


@dataclass
class MetricReport:
    j_mean: float
    f_mean: float
    g_mean: float
    per_frame: List[Tuple[float, float]] = field(default_factory=list)

    def as_dict(self):
        return {
            "j_mean": self.j_mean,
            "f_mean": self.f_mean,
            "g_mean": self.g_mean,
            "per_frame": [list(p) for p in self.per_frame],
        }


def _pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary_map(mask) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask; the image border counts as outside."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_FOUR_NEIGHBOURS, border_value=0)
    return mask & ~interior


def boundary_accuracy(pred, gt, tol_px: int = 1) -> float:
    """Boundary F-measure with Chebyshev tolerance ``tol_px``."""
    pred, gt = _pair(pred, gt)
    if tol_px < 0:
        raise UsageError("tol_px must be non-negative")
    bp, bg = boundary_map(pred), boundary_map(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    if tol_px:
        square = np.ones((2 * tol_px + 1, 2 * tol_px + 1), dtype=bool)
        near_g = ndimage.binary_dilation(bg, structure=square)
        near_p = ndimage.binary_dilation(bp, structure=square)
    else:
        near_g, near_p = bg, bp
    precision = np.count_nonzero(bp & near_g) / n_p
    recall = np.count_nonzero(bg & near_p) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def aggregate(per_frame: Sequence[Tuple[float, float]]) -> MetricReport:
    if len(per_frame) == 0:
        raise UsageError("cannot aggregate an empty list of frames")
    arr = np.asarray(per_frame, dtype=np.float64).reshape(-1, 2)
    j, f = float(arr[:, 0].mean()), float(arr[:, 1].mean())
    return MetricReport(j, f, (j + f) / 2, [(float(a), float(b)) for a, b in arr])


def evaluate_masks(preds, gts, tol_px: int = 1) -> MetricReport:
    return aggregate([(region_similarity(p, g), boundary_accuracy(p, g, tol_px)) for p, g in zip(preds, gts)])

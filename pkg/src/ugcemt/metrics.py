"""Overlap and surface-distance metrics for binary masks.

Surface voxels are foreground voxels with at least one 6-connected
background neighbour; voxels outside the grid count as background. Surface
distances from both directions are pooled before taking the mean (ASD) or
the linearly interpolated 95th percentile (95HD).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import MetricUndefinedError, ShapeError

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass
class MetricReport:
    case_id: str
    dice: float
    jaccard: float
    hd95: float
    asd: float


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / denom


def jaccard(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return np.logical_and(p, g).sum() / union


def disparity(pred_a, pred_b) -> float:
    return 1.0 - jaccard(pred_a, pred_b)


def surface(mask) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~eroded


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled nearest-surface distances (pred->gt then gt->pred), in spacing units."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        raise MetricUndefinedError("surface distance is undefined for an empty mask")
    sp, sg = surface(p), surface(g)
    spacing = tuple(float(s) for s in spacing)
    dt_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dt_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return np.concatenate([dt_g[sp], dt_p[sg]])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(np.percentile(surface_distances(pred, gt, spacing), 95))


def asd(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(surface_distances(pred, gt, spacing).mean())


def evaluate_case(pred, gt, spacing, case_id="") -> MetricReport:
    """All four metrics; surface metrics are NaN when either mask is empty."""
    try:
        d = surface_distances(pred, gt, spacing)
        h, a = float(np.percentile(d, 95)), float(d.mean())
    except MetricUndefinedError:
        h = a = float("nan")
    return MetricReport(case_id, float(dice(pred, gt)), float(jaccard(pred, gt)), h, a)


def mean_report(reports) -> MetricReport:
    if not reports:
        nan = float("nan")
        return MetricReport("mean", nan, nan, nan, nan)

    def m(attr):
        vals = np.array([getattr(r, attr) for r in reports], dtype=float)
        return float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")

    return MetricReport("mean", m("dice"), m("jaccard"), m("hd95"), m("asd"))

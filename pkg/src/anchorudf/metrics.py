"""Reconstruction metrics in the normalized frame.

``chamfer_eval`` is the mean-based symmetric Chamfer distance (unlike the
sum-form anchor loss); ``p2s`` is the mean exact distance to the reference mesh.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .geometry import SpatialIndex


def _cloud(points, name: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise DataError(f"{name} point cloud is empty")
    return pts


def nearest_sq(query, reference) -> np.ndarray:
    """Squared distance from each query point to its nearest reference point (kd-tree)."""
    d, _ = cKDTree(reference).query(query, k=1)
    return d * d


def chamfer_eval(pred, gt) -> float:
    """0.5 * (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2)."""
    a, b = _cloud(pred, "predicted"), _cloud(gt, "ground-truth")
    return 0.5 * (float(nearest_sq(a, b).mean()) + float(nearest_sq(b, a).mean()))


def p2s(pred, gt_index: SpatialIndex) -> float:
    """Mean exact point-to-surface distance."""
    pts = _cloud(pred, "predicted")
    return float(gt_index.query(pts)[1].mean())

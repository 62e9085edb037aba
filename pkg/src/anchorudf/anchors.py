"""Anchor targets by k-means and the sum-form Chamfer distance between anchor sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError

DEFAULT_SOURCE_SAMPLES = 30_000
DEFAULT_MAX_ITERS = 100
_CHUNK = 4096


@dataclass
class AnchorSet:
    points: np.ndarray  # (K, 3)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise DataError("anchor points must be finite")

    @property
    def k(self) -> int:
        return len(self.points)


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    objective: list[float]  # after each Lloyd iteration
    n_iter: int


def _nearest(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest row of ``c`` for each row of ``x``."""
    idx = np.empty(len(x), dtype=np.int64)
    d2 = np.empty(len(x))
    cc = np.sum(c * c, axis=1)
    for s in range(0, len(x), _CHUNK):
        xs = x[s:s + _CHUNK]
        dist = cc[None, :] - 2.0 * xs @ c.T
        j = np.argmin(dist, axis=1)
        idx[s:s + _CHUNK] = j
        d2[s:s + _CHUNK] = np.sum((xs - c[j]) ** 2, axis=1)
    return idx, d2


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0.0:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            i = min(i, n - 1)
        else:
            # fewer distinct points than k: any unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            i = int(unused[rng.integers(len(unused))])
        chosen.append(i)
        d2 = np.minimum(d2, np.sum((x - x[i]) ** 2, axis=1))
    return x[chosen].copy()


def kmeans(points, k: int, max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iters`` iterations or once no assignment changes. An
    empty cluster is moved onto the point farthest from its current center.
    Cluster sums use ``np.bincount`` so the reduction order is fixed.
    """
    x = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if k < 1:
        raise DataError("k must be >= 1")
    if len(x) < k:
        raise DataError(f"need at least k={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = np.full(len(x), -1, dtype=np.int64)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        new_labels, d2 = _nearest(x, centers)
        changed = np.any(new_labels != labels)
        labels = new_labels
        if not changed:
            history.append(float(d2.sum()))
            break
        counts = np.bincount(labels, minlength=k)
        for ax in range(3):
            sums = np.bincount(labels, weights=x[:, ax], minlength=k)
            nonempty = counts > 0
            centers[nonempty, ax] = sums[nonempty] / counts[nonempty]
        d2 = np.sum((x - centers[labels]) ** 2, axis=1)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(d2))
            centers[j] = x[far]
            labels[far] = j
            d2[far] = 0.0
        history.append(float(d2.sum()))
    return KMeansResult(centers=centers, labels=labels, objective=history, n_iter=it)


def kmeans_anchors(surface_points, k: int, max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0) -> AnchorSet:
    return AnchorSet(kmeans(surface_points, k, max_iters, seed).centers)


def _as_set(a, name: str) -> np.ndarray:
    pts = np.ascontiguousarray(a.points if isinstance(a, AnchorSet) else a, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise DataError(f"Chamfer distance of an empty set ({name})")
    return pts


def chamfer_sq(a, b) -> float:
    """Sum over both sets of squared distances to the nearest member of the other set."""
    pa, pb = _as_set(a, "a"), _as_set(b, "b")
    _, da = _nearest(pa, pb)
    _, db = _nearest(pb, pa)
    return float(da.sum() + db.sum())


def chamfer_sq_tensor(pred: ad.Tensor, target) -> ad.Tensor:
    """Differentiable :func:`chamfer_sq` w.r.t. the (K, 3) tensor ``pred``."""
    pa = pred.value.reshape(-1, 3)
    pb = _as_set(target, "target")
    if len(pa) == 0:
        raise DataError("Chamfer distance of an empty set (pred)")
    ia, da = _nearest(pa, pb)
    ib, db = _nearest(pb, pa)

    def bw(g):
        grad = 2.0 * (pa - pb[ia])
        np.add.at(grad, ib, 2.0 * (pa[ib] - pb))
        return (g * grad.reshape(pred.shape),)

    return ad.make_node(np.array(da.sum() + db.sum()), (pred,), bw, "chamfer_sq")

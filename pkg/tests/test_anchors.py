import itertools

import numpy as np
import pytest

from anchorudf import autodiff as ad
from anchorudf.anchors import AnchorSet, chamfer_sq, chamfer_sq_tensor, kmeans, kmeans_anchors
from anchorudf.errors import DataError

CORNERS = np.array(list(itertools.product((-0.5, 0.5), repeat=3)))


def brute_chamfer(a, b):
    d = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return d.min(axis=1).sum() + d.min(axis=0).sum()


def sort_rows(x):
    return x[np.lexsort(x.T[::-1])]


def test_cube_corners_recovered_exactly():
    pts = np.repeat(CORNERS, 20, axis=0)
    res = kmeans(pts, 8, seed=0)
    assert np.array_equal(sort_rows(res.centers), sort_rows(CORNERS))
    assert res.objective[-1] == 0.0


def test_cube_corner_clusters_give_cluster_means(rng):
    pts = np.concatenate([c + rng.normal(0, 0.02, size=(50, 3)) for c in CORNERS])
    res = kmeans(pts, 8, seed=1)
    means = np.array([pts[50 * i:50 * (i + 1)].mean(axis=0) for i in range(8)])
    assert np.allclose(sort_rows(res.centers), sort_rows(means), atol=1e-15)
    # every label block is one cluster
    assert all(len(set(res.labels[50 * i:50 * (i + 1)].tolist())) == 1 for i in range(8))


def test_objective_monotone(rng):
    pts = rng.uniform(-0.5, 0.5, size=(3000, 3))
    res = kmeans(pts, 40, seed=2)
    obj = np.array(res.objective)
    assert len(obj) >= 2
    assert np.all(np.diff(obj) <= 1e-12 * obj[0])


def test_kmeans_deterministic_and_seeded(rng):
    pts = rng.uniform(size=(500, 3))
    a, b = kmeans(pts, 10, seed=4), kmeans(pts, 10, seed=4)
    assert np.array_equal(a.centers, b.centers)
    assert kmeans_anchors(pts, 10, seed=4).k == 10


def test_kmeans_with_duplicates_and_bad_k():
    pts = np.array([[0.0, 0, 0]] * 5 + [[1.0, 0, 0]] * 5)
    res = kmeans(pts, 3, seed=0)  # only two distinct points
    assert len(res.centers) == 3 and np.all(np.isfinite(res.centers))
    with pytest.raises(DataError):
        kmeans(pts, 11)
    with pytest.raises(DataError):
        kmeans(pts, 0)


def test_chamfer_small_cases():
    assert chamfer_sq(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == 2.0
    a = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    b = np.array([[0.0, 1, 0]])
    # a -> b: 1 + 5; b -> a: 1
    assert chamfer_sq(a, b) == 7.0


def test_chamfer_properties(rng):
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    assert chamfer_sq(a, a) == 0.0
    assert chamfer_sq(a, b) == chamfer_sq(b, a)
    assert chamfer_sq(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-13)
    assert chamfer_sq(AnchorSet(a), AnchorSet(b)) == chamfer_sq(a, b)
    with pytest.raises(DataError):
        chamfer_sq(np.zeros((0, 3)), b)


def test_chamfer_tensor_gradient(rng):
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(20, 3))
    t = ad.Tensor(a, requires_grad=True)
    out = chamfer_sq_tensor(t, b)
    assert float(out.value) == pytest.approx(brute_chamfer(a, b), rel=1e-13)
    g = ad.backward(out)[t]
    h = 1e-6
    fd = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(3):
            ap, am = a.copy(), a.copy()
            ap[i, j] += h
            am[i, j] -= h
            fd[i, j] = (brute_chamfer(ap, b) - brute_chamfer(am, b)) / (2 * h)
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-8)

import numpy as np
import pytest

from anchorudf.errors import DataError
from anchorudf.geometry import build_index, make_synthetic
from anchorudf.metrics import chamfer_eval, p2s


def brute_chamfer(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return 0.5 * (d.min(1).mean() + d.min(0).mean())


def test_chamfer_hand_computed():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    # a -> b: 1; b -> a: (1 + 4) / 2
    assert chamfer_eval(a, b) == pytest.approx(0.5 * (1.0 + 2.5), rel=1e-15)


def test_chamfer_matches_brute_force_and_is_symmetric(rng):
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(170, 3))
    assert chamfer_eval(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-12)
    assert chamfer_eval(a, b) == pytest.approx(chamfer_eval(b, a), rel=1e-15)
    assert chamfer_eval(a, a) == 0.0


def test_metrics_reject_empty_clouds(hemisphere_index):
    with pytest.raises(DataError):
        chamfer_eval(np.zeros((0, 3)), np.zeros((3, 3)))
    with pytest.raises(DataError):
        p2s(np.zeros((0, 3)), hemisphere_index)


def test_p2s_over_flat_patch_is_mean_height(rng):
    index = build_index(make_synthetic("patch", 5))  # unit square in z = 0
    pts = np.column_stack([rng.uniform(-0.4, 0.4, (500, 2)), rng.normal(0.0, 0.1, 500)])
    assert p2s(pts, index) == pytest.approx(np.abs(pts[:, 2]).mean(), rel=1e-13)


def test_p2s_matches_brute_force(hemisphere_index, rng):
    pts = rng.uniform(-0.6, 0.6, size=(400, 3))
    expected = hemisphere_index.query_brute_force(pts)[1].mean()
    assert p2s(pts, hemisphere_index) == pytest.approx(expected, rel=1e-12)

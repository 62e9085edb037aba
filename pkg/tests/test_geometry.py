import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorudf.errors import DataError, MeshError, ObjParseError, UndefinedDirectionError
from anchorudf.geometry import (LEAF_SIZE, TriangleMesh, build_index, closest_point, grad_dir_exact, load_obj,
                                make_synthetic, normalize_mesh, sample_surface, save_obj, udf_exact)

UNIT_TRI = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def write(tmp_path, text, name="m.obj"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------- OBJ I/O

def test_obj_quad_is_fan_triangulated(tmp_path):
    mesh = load_obj(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"))
    assert mesh.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_negative_and_slashed_indices(tmp_path):
    mesh = load_obj(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3/1/1 -2//1 -1\n"))
    assert mesh.triangles.tolist() == [[0, 1, 2]]


def test_obj_bad_index_reports_line(tmp_path):
    with pytest.raises(ObjParseError) as exc:
        load_obj(write(tmp_path, "v 0 0 0\nv 1 0 0\n# comment\nf 1 2 7\n"))
    assert exc.value.line == 4


def test_obj_bad_coordinate(tmp_path):
    with pytest.raises(ObjParseError):
        load_obj(write(tmp_path, "v 0 zero 0\n"))


def test_obj_drops_degenerate_faces(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 4\nf 1 1 4\n"
    assert load_obj(write(tmp_path, text)).triangles.tolist() == [[0, 1, 3]]
    # collinear triangle kept on request; the repeated-index face never is
    assert load_obj(write(tmp_path, text), keep_degenerate=True).n_triangles == 2


def test_obj_round_trip_is_exact(tmp_path):
    mesh, _ = normalize_mesh(make_synthetic("open_cylinder", 5))
    save_obj(mesh, tmp_path / "c.obj")
    back = load_obj(tmp_path / "c.obj")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)


# ---------------------------------------------------------------- synthetic shapes

@pytest.mark.parametrize("kind,res,n_tri,n_boundary", [
    ("sphere", 8, 2 * 16 + 2 * 16 * 6, 0),  # two pole fans + 6 quad bands of 16
    ("hemisphere", 8, 16 + 2 * 16 * 7, 16),
    ("patch", 2, 2, 4),
    ("patch", 5, 32, 16),
    ("open_cylinder", 3, 2 * 6 * 2, 12),
])
def test_synthetic_counts(kind, res, n_tri, n_boundary):
    mesh = make_synthetic(kind, res)
    mesh.validate()
    assert mesh.n_triangles == n_tri
    assert len(mesh.boundary_edges()) == n_boundary


def test_synthetic_rejects_bad_input():
    with pytest.raises(MeshError):
        make_synthetic("cube", 8)
    with pytest.raises(MeshError):
        make_synthetic("sphere", 1)


def test_normalize_mesh():
    mesh, tf = normalize_mesh(make_synthetic("hemisphere", 6))
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    assert np.max(hi - lo) == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(lo + hi, 0.0, atol=1e-15)
    # radius-1 hemisphere: bbox 2 x 2 x 1
    assert tf.scale == pytest.approx(0.5)
    assert np.allclose(tf.invert(mesh.vertices), make_synthetic("hemisphere", 6).vertices, atol=1e-15)


# ---------------------------------------------------------------- closest point

@pytest.mark.parametrize("p,q,d", [
    ((0.25, 0.25, 1.0), (0.25, 0.25, 0.0), 1.0),          # face interior
    ((2.0, 2.0, 0.0), (0.5, 0.5, 0.0), 1.5 * math.sqrt(2)),  # hypotenuse edge
    ((-1.0, -1.0, 0.0), (0.0, 0.0, 0.0), math.sqrt(2)),      # vertex
    ((0.5, -1.0, 0.5), (0.5, 0.0, 0.0), math.sqrt(1.25)),    # edge on the x axis
    ((3.0, -0.5, 0.0), (1.0, 0.0, 0.0), math.sqrt(4.25)),    # vertex region of (1, 0, 0)
])
def test_closest_point_regions(p, q, d):
    hit = closest_point(build_index(UNIT_TRI), np.array(p))
    assert np.allclose(hit.q, q, atol=1e-15)
    assert hit.distance == pytest.approx(d, rel=1e-15)
    assert hit.triangle_id == 0


def test_udf_on_surface_is_zero_and_direction_undefined():
    idx = build_index(UNIT_TRI)
    assert udf_exact(idx, np.array([0.2, 0.3, 0.0])) < 1e-15
    with pytest.raises(UndefinedDirectionError):
        grad_dir_exact(idx, np.array([0.2, 0.3, 0.0]))
    assert np.allclose(grad_dir_exact(idx, np.array([0.2, 0.3, -2.0])), [0, 0, -1])


def test_bvh_matches_brute_force(hemisphere_index, rng):
    pts = rng.uniform(-0.7, 0.7, size=(2000, 3))
    q1, d1, t1 = hemisphere_index.query(pts)
    q2, d2, t2 = hemisphere_index.query_brute_force(pts)
    assert np.array_equal(d1, d2) and np.array_equal(t1, t2) and np.array_equal(q1, q2)


def test_bvh_structure(hemisphere_index):
    idx = hemisphere_index
    leaves = idx.leaves()
    assert all(1 <= len(l) <= LEAF_SIZE for l in leaves)
    assert sorted(np.concatenate(leaves).tolist()) == list(range(idx.mesh.n_triangles))
    corners = idx.corners
    for n in range(idx.n_nodes):
        if idx.left[n] >= 0:
            for c in (idx.left[n], idx.right[n]):
                assert np.all(idx.lo[n] <= idx.lo[c]) and np.all(idx.hi[c] <= idx.hi[n])
        else:
            tris = corners[idx.order[idx.start[n]:idx.start[n] + idx.count[n]]]
            assert np.all(tris.min(axis=(0, 1)) >= idx.lo[n]) and np.all(tris.max(axis=(0, 1)) <= idx.hi[n])
    with pytest.raises(ValueError):
        idx.lo[0, 0] = 5.0  # read-only


def test_sphere_distance_matches_analytic(rng):
    res, r = 48, 1.0
    idx = build_index(make_synthetic("sphere", res, radius=r))
    pts = rng.normal(size=(3000, 3)) * 0.8
    d = idx.query(pts)[1]
    analytic = np.abs(np.linalg.norm(pts, axis=1) - r)
    # an inscribed polyhedron with angular spacing pi/res deviates by at most this sagitta
    sagitta = r * (1.0 - math.cos(math.pi / res))
    assert np.max(np.abs(d - analytic)) <= sagitta


def test_query_rejects_non_finite(hemisphere_index):
    with pytest.raises(DataError):
        hemisphere_index.query(np.array([[0.0, np.nan, 0.0]]))


triangle_soups = st.integers(1, 12).flatmap(lambda n: st.lists(
    st.floats(-1, 1, allow_nan=False, width=32), min_size=9 * n, max_size=9 * n))


@settings(max_examples=40, deadline=None)
@given(coords=triangle_soups, seed=st.integers(0, 2**31))
def test_random_soup_matches_brute_force(coords, seed):
    corners = np.array(coords, dtype=np.float64).reshape(-1, 3, 3)
    mesh = TriangleMesh(corners.reshape(-1, 3), np.arange(len(corners) * 3).reshape(-1, 3))
    idx = build_index(mesh)
    pts = np.random.default_rng(seed).uniform(-1.5, 1.5, size=(50, 3))
    d1 = idx.query(pts)[1]
    d2 = idx.query_brute_force(pts)[1]
    assert np.array_equal(d1, d2)
    # the closest point is never farther than any triangle vertex
    vert_d = np.min(np.linalg.norm(pts[:, None, :] - corners.reshape(1, -1, 3), axis=2), axis=1)
    assert np.all(d1 <= vert_d + 1e-12)


# ---------------------------------------------------------------- surface sampling

def test_surface_samples_lie_on_mesh(hemisphere, hemisphere_index):
    pts, tri = sample_surface(hemisphere, 5000, seed=3)
    assert np.max(hemisphere_index.query(pts)[1]) < 1e-12
    # each sample lies in the plane of its source triangle
    c = hemisphere.corners()[tri]
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    assert np.max(np.abs(np.sum((pts - c[:, 0]) * n, axis=1))) < 1e-14


def test_surface_sampling_is_area_weighted():
    # two triangles with area ratio 1:3 -> binomial(20000, 0.25) hits on the first
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [3, 0, 1], [0, 1, 1]])
    mesh = TriangleMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    n = 20000
    _, tri = sample_surface(mesh, n, seed=11)
    k = int(np.sum(tri == 0))
    sd = math.sqrt(n * 0.25 * 0.75)
    assert abs(k - 0.25 * n) < 5 * sd


def test_surface_sampling_deterministic(hemisphere):
    a, _ = sample_surface(hemisphere, 100, seed=9)
    b, _ = sample_surface(hemisphere, 100, seed=9)
    assert np.array_equal(a, b)

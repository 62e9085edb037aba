"""Triangle meshes, synthetic open surfaces and exact unsigned-distance queries.

Everything downstream (training targets, direction labels, evaluation) treats
the closest-point queries in this module as ground truth, so the point-triangle
routine is exact up to floating point: it classifies the query into the face,
edge or vertex Voronoi region of each triangle.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .errors import DataError, MeshError, ObjParseError, UndefinedDirectionError

DIRECTION_EPSILON = 1e-8
LEAF_SIZE = 4
# relative area threshold below which a triangle counts as degenerate
_DEGENERATE_REL = 1e-14


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """Triangle corner coordinates, shape (T, 3, 3)."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def edge_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for a, b, c in self.triangles.tolist():
            for u, v in ((a, b), (b, c), (c, a)):
                key = (u, v) if u < v else (v, u)
                counts[key] = counts.get(key, 0) + 1
        return counts

    def boundary_edges(self) -> list[tuple[int, int]]:
        """Undirected edges with exactly one incident triangle."""
        return sorted(e for e, n in self.edge_counts().items() if n == 1)

    def validate(self) -> None:
        t = self.triangles
        if t.size and (t.min() < 0 or t.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError("triangle with repeated vertex")


def _degenerate_mask(corners: np.ndarray) -> np.ndarray:
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    e3 = corners[:, 2] - corners[:, 1]
    cross2 = np.sum(np.cross(e1, e2) ** 2, axis=1)
    longest2 = np.max(np.stack([np.sum(e * e, axis=1) for e in (e1, e2, e3)]), axis=0)
    return cross2 <= _DEGENERATE_REL * longest2 * longest2


# --------------------------------------------------------------------------
# OBJ I/O


def _parse_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(f"bad face index {token!r}", lineno) from None
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if idx < 0 or idx >= n_vertices:
        raise ObjParseError(f"vertex index {head} out of range (have {n_vertices} vertices)", lineno)
    return idx


def load_obj(path, keep_degenerate: bool = False) -> TriangleMesh:
    """Read an ASCII OBJ file; polygons are fan-triangulated.

    Faces may only reference vertices defined earlier in the file. Zero-area
    triangles are dropped unless ``keep_degenerate`` is set; triangles that
    repeat a vertex index are always dropped.
    """
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError("vertex needs 3 coordinates", lineno)
                try:
                    xyz = [float(x) for x in parts[1:4]]
                except ValueError:
                    raise ObjParseError(f"bad vertex coordinate in {line!r}", lineno) from None
                if not all(np.isfinite(xyz)):
                    raise ObjParseError("non-finite vertex coordinate", lineno)
                vertices.append(xyz)
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError("face needs at least 3 vertices", lineno)
                idx = [_parse_index(tok, len(vertices), lineno) for tok in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
            # vn, vt, usemtl, o, g, s ... are ignored

    verts = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    tris = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(tris):
        distinct = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
        tris = tris[distinct]
    if len(tris) and not keep_degenerate:
        tris = tris[~_degenerate_mask(verts[tris])]
    return TriangleMesh(verts, tris)


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        # repr of a Python float round-trips exactly
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.triangles + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


# --------------------------------------------------------------------------
# synthetic shapes

SYNTHETIC_KINDS = ("sphere", "hemisphere", "patch", "open_cylinder")


def _grid_quads(rows: int, cols: int, offset: int, wrap: bool) -> list[tuple[int, int, int]]:
    # vertex (i, j) -> offset + i * cols + j; j wraps around when `wrap`
    tris = []
    jmax = cols if wrap else cols - 1
    for i in range(rows - 1):
        for j in range(jmax):
            j1 = (j + 1) % cols
            a = offset + i * cols + j
            b = offset + i * cols + j1
            c = offset + (i + 1) * cols + j
            d = offset + (i + 1) * cols + j1
            tris.append((a, c, d))
            tris.append((a, d, b))
    return tris


def _sphere(radius: float, res: int, hemisphere: bool) -> TriangleMesh:
    n_lon = 2 * res
    n_lat = res
    theta_max = 0.5 * np.pi if hemisphere else np.pi
    # ring i sits at polar angle theta_max * i / n_lat
    ring_ids = range(1, n_lat + 1) if hemisphere else range(1, n_lat)
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    verts = [np.array([[0.0, 0.0, radius]])]
    for i in ring_ids:
        th = theta_max * i / n_lat
        ring = np.stack([np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi), np.full(n_lon, np.cos(th))], axis=1)
        verts.append(radius * ring)
    n_rings = len(ring_ids)
    tris = [(0, 1 + j, 1 + (j + 1) % n_lon) for j in range(n_lon)]
    tris += _grid_quads(n_rings, n_lon, 1, wrap=True)
    if not hemisphere:
        south = 1 + n_rings * n_lon
        verts.append(np.array([[0.0, 0.0, -radius]]))
        last = 1 + (n_rings - 1) * n_lon
        tris += [(south, last + (j + 1) % n_lon, last + j) for j in range(n_lon)]
    return TriangleMesh(np.concatenate(verts), np.array(tris))


def make_synthetic(kind: str, resolution: int, **params) -> TriangleMesh:
    """Build a synthetic test surface.

    ``sphere`` is closed; ``hemisphere`` (rim at z=0), ``patch`` (a flat
    rectangle in the xy plane, ``resolution`` vertices per side) and
    ``open_cylinder`` (no caps) all have boundary edges.
    """
    if kind not in SYNTHETIC_KINDS:
        raise MeshError(f"unknown synthetic kind {kind!r}; choose from {', '.join(SYNTHETIC_KINDS)}")
    if int(resolution) != resolution or resolution < 2:
        raise MeshError(f"resolution must be an integer >= 2, got {resolution!r}")
    res = int(resolution)
    if kind == "sphere":
        return _sphere(float(params.get("radius", 1.0)), res, hemisphere=False)
    if kind == "hemisphere":
        return _sphere(float(params.get("radius", 1.0)), res, hemisphere=True)
    if kind == "patch":
        w = float(params.get("width", 1.0))
        h = float(params.get("height", 1.0))
        xs = np.linspace(-w / 2, w / 2, res)
        ys = np.linspace(-h / 2, h / 2, res)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        verts = np.stack([xx.ravel(), yy.ravel(), np.zeros(res * res)], axis=1)
        return TriangleMesh(verts, np.array(_grid_quads(res, res, 0, wrap=False)))
    # open_cylinder
    r = float(params.get("radius", 1.0))
    height = float(params.get("height", 2.0))
    n_lon = max(3, 2 * res)
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    zs = np.linspace(-height / 2, height / 2, res)
    verts = np.concatenate([np.stack([r * np.cos(phi), r * np.sin(phi), np.full(n_lon, z)], axis=1) for z in zs])
    return TriangleMesh(verts, np.array(_grid_quads(res, n_lon, 0, wrap=True)))


# --------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class Transform:
    """Maps original coordinates x to normalized ones via (x - center) * scale."""

    scale: float
    center: tuple[float, float, float]

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + np.asarray(self.center)


def normalize_mesh(mesh: TriangleMesh) -> tuple[TriangleMesh, Transform]:
    """Center the bounding box at the origin and scale its longest edge to 1."""
    if len(mesh.vertices) == 0 or mesh.n_triangles == 0:
        raise MeshError("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float(np.max(hi - lo))
    if not extent > 0.0:
        raise MeshError("mesh has zero spatial extent")
    tf = Transform(scale=1.0 / extent, center=tuple(float(c) for c in 0.5 * (lo + hi)))
    return TriangleMesh(tf.apply(mesh.vertices), mesh.triangles.copy()), tf


# --------------------------------------------------------------------------
# exact point-triangle projection


@njit(cache=True)
def _closest_on_segment(px, py, pz, ax, ay, az, bx, by, bz):
    dx, dy, dz = bx - ax, by - ay, bz - az
    len2 = dx * dx + dy * dy + dz * dz
    t = 0.0
    if len2 > 0.0:
        t = ((px - ax) * dx + (py - ay) * dy + (pz - az) * dz) / len2
        t = min(1.0, max(0.0, t))
    return ax + t * dx, ay + t * dy, az + t * dz


@njit(cache=True)
def _closest_on_triangle(p, a, b, c, degenerate):
    """Closest point on triangle abc to p (region classification, Ericson 5.1.5)."""
    px, py, pz = p[0], p[1], p[2]
    if degenerate:
        best = np.inf
        qx = qy = qz = 0.0
        for k in range(3):
            u = a if k == 0 else (b if k == 1 else c)
            v = b if k == 0 else (c if k == 1 else a)
            sx, sy, sz = _closest_on_segment(px, py, pz, u[0], u[1], u[2], v[0], v[1], v[2])
            d2 = (px - sx) ** 2 + (py - sy) ** 2 + (pz - sz) ** 2
            if d2 < best:
                best = d2
                qx, qy, qz = sx, sy, sz
        return qx, qy, qz

    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = px - a[0], py - a[1], pz - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2]

    bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2]

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a[0] + v * abx, a[1] + v * aby, a[2] + v * abz

    cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2]

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * acx, a[1] + w * acy, a[2] + w * acz

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2])

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a[0] + abx * v + acx * w, a[1] + aby * v + acy * w, a[2] + abz * v + acz * w


@njit(cache=True)
def _box_dist2(p, lo, hi):
    d2 = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d2 += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d2 += (p[k] - hi[k]) ** 2
    return d2


@njit(cache=True)
def _query_bvh(points, corners, degenerate, lo, hi, left, right, start, count, order, out_q, out_d2, out_tid):
    stack = np.empty(128, dtype=np.int64)
    for i in range(points.shape[0]):
        p = points[i]
        best = np.inf
        bq0 = bq1 = bq2 = 0.0
        btid = -1
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # ">" rather than ">=" so equal-distance triangles still get the lower-id tie break
            if _box_dist2(p, lo[node], hi[node]) > best:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    t = order[k]
                    tri = corners[t]
                    qx, qy, qz = _closest_on_triangle(p, tri[0], tri[1], tri[2], degenerate[t])
                    d2 = (p[0] - qx) ** 2 + (p[1] - qy) ** 2 + (p[2] - qz) ** 2
                    if d2 < best or (d2 == best and t < btid):
                        best = d2
                        bq0, bq1, bq2 = qx, qy, qz
                        btid = t
            else:
                l, r = left[node], right[node]
                dl = _box_dist2(p, lo[l], hi[l])
                dr = _box_dist2(p, lo[r], hi[r])
                # push the farther child first so the nearer one is visited next
                if dl <= dr:
                    stack[sp] = r
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = r
                sp += 2
        out_q[i, 0] = bq0
        out_q[i, 1] = bq1
        out_q[i, 2] = bq2
        out_d2[i] = best
        out_tid[i] = btid


@njit(cache=True)
def _brute_force(points, corners, degenerate, out_q, out_d2, out_tid):
    for i in range(points.shape[0]):
        p = points[i]
        best = np.inf
        for t in range(corners.shape[0]):
            tri = corners[t]
            qx, qy, qz = _closest_on_triangle(p, tri[0], tri[1], tri[2], degenerate[t])
            d2 = (p[0] - qx) ** 2 + (p[1] - qy) ** 2 + (p[2] - qz) ** 2
            if d2 < best:
                best = d2
                out_q[i, 0] = qx
                out_q[i, 1] = qy
                out_q[i, 2] = qz
                out_tid[i] = t
        out_d2[i] = best


# --------------------------------------------------------------------------
# bounding volume hierarchy


@dataclass(frozen=True)
class ClosestHit:
    q: np.ndarray
    distance: float
    triangle_id: int


class SpatialIndex:
    """Binary BVH over a triangle mesh; immutable once built.

    Nodes are stored depth-first in flat arrays. Internal nodes have
    ``left``/``right`` child ids; leaves have ``left == -1`` and own the slice
    ``order[start:start + count]`` of triangle ids.
    """

    def __init__(self, mesh: TriangleMesh):
        if mesh.n_triangles == 0:
            raise MeshError("cannot index an empty mesh")
        mesh.validate()
        self.mesh = mesh
        self.corners = np.ascontiguousarray(mesh.corners())
        self.degenerate = _degenerate_mask(self.corners)
        self._build()
        for arr in (self.corners, self.degenerate, self.lo, self.hi, self.left, self.right,
                    self.start, self.count, self.order):
            arr.setflags(write=False)

    def _build(self) -> None:
        corners = self.corners
        tri_lo = corners.min(axis=1)
        tri_hi = corners.max(axis=1)
        centroids = corners.mean(axis=1)
        lo, hi, left, right, start, count = [], [], [], [], [], []
        order: list[int] = []

        def new_node(ids: np.ndarray) -> int:
            nid = len(lo)
            lo.append(tri_lo[ids].min(axis=0))
            hi.append(tri_hi[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            return nid

        root = new_node(np.arange(len(corners)))
        todo = [(root, np.arange(len(corners)))]
        while todo:
            nid, ids = todo.pop()
            if len(ids) <= LEAF_SIZE:
                start[nid] = len(order)
                count[nid] = len(ids)
                order.extend(ids.tolist())
                continue
            c = centroids[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            ids = ids[np.argsort(c[:, axis], kind="stable")]
            mid = len(ids) // 2
            lid = new_node(ids[:mid])
            rid = new_node(ids[mid:])
            left[nid] = lid
            right[nid] = rid
            # right pushed first so the left subtree is laid out first
            todo.append((rid, ids[mid:]))
            todo.append((lid, ids[:mid]))

        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.order = np.array(order, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return len(self.lo)

    def leaves(self) -> list[np.ndarray]:
        return [self.order[s:s + c] for s, c, l in zip(self.start, self.count, self.left) if l < 0]

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batched closest-point query: returns (q, distance, triangle_id)."""
        pts = _as_points(points)
        n = len(pts)
        q = np.empty((n, 3))
        d2 = np.empty(n)
        tid = np.empty(n, dtype=np.int64)
        _query_bvh(pts, self.corners, self.degenerate, self.lo, self.hi, self.left, self.right,
                   self.start, self.count, self.order, q, d2, tid)
        # distance recomputed from q so distance == |p - q| holds exactly
        return q, np.linalg.norm(pts - q, axis=1), tid

    def query_brute_force(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exhaustive per-triangle minimum (no hierarchy)."""
        pts = _as_points(points)
        n = len(pts)
        q = np.empty((n, 3))
        d2 = np.empty(n)
        tid = np.empty(n, dtype=np.int64)
        _brute_force(pts, self.corners, self.degenerate, q, d2, tid)
        return q, np.linalg.norm(pts - q, axis=1), tid


def _as_points(points) -> np.ndarray:
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise DataError("query points must be finite")
    return pts


def build_index(mesh: TriangleMesh) -> SpatialIndex:
    return SpatialIndex(mesh)


def closest_point(index: SpatialIndex, p) -> ClosestHit:
    q, d, tid = index.query(p)
    if len(q) != 1:
        raise DataError("closest_point takes a single 3D point; use SpatialIndex.query for batches")
    return ClosestHit(q=q[0], distance=float(d[0]), triangle_id=int(tid[0]))


def udf_exact(index: SpatialIndex, p):
    """Exact unsigned distance; scalar for one point, array for (N, 3) input."""
    _, d, _ = index.query(p)
    return float(d[0]) if np.ndim(p) == 1 else d


def grad_dir_exact(index: SpatialIndex, p, epsilon: float = DIRECTION_EPSILON):
    """Unit direction (p - q) / |p - q| pointing away from the closest surface point."""
    pts = _as_points(p)
    q, d, _ = index.query(pts)
    bad = d <= epsilon
    if np.any(bad):
        raise UndefinedDirectionError(
            f"{int(bad.sum())} point(s) within {epsilon:g} of the surface; direction undefined")
    dirs = (pts - q) / d[:, None]
    return dirs[0] if np.ndim(p) == 1 else dirs


# --------------------------------------------------------------------------
# surface sampling


def _barycentric_points(corners: np.ndarray, tri_ids: np.ndarray, r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    s = np.sqrt(r1)[:, None]
    r2 = r2[:, None]
    c = corners[tri_ids]
    return (1.0 - s) * c[:, 0] + s * (1.0 - r2) * c[:, 1] + s * r2 * c[:, 2]


class SurfaceSampler:
    """Area-weighted point sampler reusable across many RNG streams."""

    def __init__(self, mesh: TriangleMesh):
        areas = mesh.areas()
        total = float(areas.sum())
        if not total > 0.0:
            raise MeshError("mesh has zero total area")
        self.corners = mesh.corners()
        self.cdf = np.cumsum(areas) / total
        self.cdf[-1] = 1.0

    def draw(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        u = rng.random((n, 3))
        tri = np.minimum(np.searchsorted(self.cdf, u[:, 0], side="right"), len(self.cdf) - 1)
        return _barycentric_points(self.corners, tri, u[:, 1], u[:, 2]), tri


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` points uniformly by area; returns (points, source triangle ids)."""
    if n < 1:
        raise MeshError("sample count must be >= 1")
    return SurfaceSampler(mesh).draw(np.random.default_rng(seed), int(n))

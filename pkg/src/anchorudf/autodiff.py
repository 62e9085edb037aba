"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op records its parents and a closure mapping the output cotangent to
one cotangent per parent. :func:`backward` walks the tape in reverse
topological order and accumulates into ``leaf.grad``.

Only first-order derivatives are supported. Spatial gradients needed inside a
loss are taken by central differences (:func:`fd_spatial_grad`), which keeps
the objective first-order in the parameters.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Raise FloatingPointError as soon as an op produces a non-finite value."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __array_priority__ = 100.0
    __slots__ = ("value", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(value, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create an op output. ``backward(g)`` returns one cotangent (or None) per parent.

    Exposed so other modules can register fused ops (e.g. the Chamfer loss).
    """
    parents = tuple(parents)
    out = Tensor(value)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    if _DEBUG and not np.all(np.isfinite(out.value)):
        raise FloatingPointError(f"non-finite value produced by op {op!r}")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.value * b.value, (a, b), bw, "mul")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return make_node(a.value * s, (a,), lambda g: (g * s,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0.0  # subgradient 0 at 0
    return make_node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.value)
    return make_node(np.abs(a.value), (a,), lambda g: (g * sign,), "abs")


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    to_a = a.value <= b.value

    def bw(g):
        ga = _unbroadcast(np.where(to_a, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(to_a, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(np.where(to_a, a.value, b.value), (a, b), bw, "minimum")


# --------------------------------------------------------------------------
# shape manipulation and reductions


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    ax = axis % value.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)] if t.requires_grad else None)
        return tuple(out)

    return make_node(value, tensors, bw, "concat")


def index(a, idx) -> Tensor:
    """Slicing / integer indexing (numpy semantics); repeated indices accumulate."""
    a = as_tensor(a)

    def bw(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return make_node(a.value[idx], (a,), bw, "index")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return make_node(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(np.broadcast_to(a.value, shape).copy(), (a,),
                     lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return make_node(a.value.sum(axis=axis, keepdims=keepdims), (a,),
                     lambda g: (_expand(g, a.shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.value.mean(axis=axis, keepdims=keepdims)
    n = a.size / max(value.size, 1)
    return make_node(value, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / n,), "mean")


def l2norm(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.value ** 2, axis=axis))

    def bw(g):
        n = np.expand_dims(norm, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return (np.expand_dims(g, axis) * np.where(n > 0.0, a.value / safe, 0.0),)

    return make_node(norm, (a,), bw, "l2norm")


def cosine_similarity(u, v, axis: int = -1) -> Tensor:
    """Cosine along ``axis``; defined as 0 (with zero gradient) if either vector is zero."""
    u, v = as_tensor(u), as_tensor(v)
    nu = np.sqrt(np.sum(u.value ** 2, axis=axis, keepdims=True))
    nv = np.sqrt(np.sum(v.value ** 2, axis=axis, keepdims=True))
    ok = (nu > 0.0) & (nv > 0.0)
    denom = np.where(ok, nu * nv, 1.0)
    cos = np.where(ok, np.sum(u.value * v.value, axis=axis, keepdims=True) / denom, 0.0)

    def bw(g):
        g = np.expand_dims(g, axis)
        gu = gv = None
        if u.requires_grad:
            gu = np.where(ok, g * (v.value / denom - cos * u.value / np.where(ok, nu * nu, 1.0)), 0.0)
            gu = _unbroadcast(gu, u.shape)
        if v.requires_grad:
            gv = np.where(ok, g * (u.value / denom - cos * v.value / np.where(ok, nv * nv, 1.0)), 0.0)
            gv = _unbroadcast(gv, v.shape)
        return gu, gv

    return make_node(np.squeeze(cos, axis=axis), (u, v), bw, "cosine")


# --------------------------------------------------------------------------
# layers


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (in,) or (N, in); weight is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    parents = [x, weight]
    value = x.value @ weight.value.T
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
        value = value + bias.value

    def bw(g):
        gx = g @ weight.value if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.outer(g, x.value) if x.value.ndim == 1 else g.T @ x.value
        grads = [gx, gw]
        if bias is not None:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return tuple(grads)

    return make_node(value, parents, bw, "linear")


def conv3d(x, weight, bias=None) -> Tensor:
    """Stride-1, zero-padded 3x3x3 cross-correlation on a channels-last grid.

    x: (D, H, W, Cin); weight: (Cout, Cin, 3, 3, 3); output (D, H, W, Cout).

    The zero-padded volume is flattened with a margin on both ends, so each of
    the 27 taps is a contiguous slice at a fixed offset; outputs computed on
    the padding shell are garbage and cropped.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.value.ndim != 4 or weight.value.ndim != 5 or weight.shape[2:] != (3, 3, 3):
        raise ValueError(f"conv3d shape mismatch: x {x.shape}, weight {weight.shape}")
    if weight.shape[1] != x.shape[3]:
        raise ValueError(f"conv3d channel mismatch: x has {x.shape[3]}, weight expects {weight.shape[1]}")
    D, H, W, cin = x.shape
    cout = weight.shape[0]
    sD, sH = (H + 2) * (W + 2), W + 2
    margin = sD + sH + 1
    ntot = (D + 2) * sD
    offsets = [margin + (a - 1) * sD + (b - 1) * sH + (c - 1)
               for a in range(3) for b in range(3) for c in range(3)]
    interior = (slice(None), slice(1, -1), slice(1, -1), slice(1, -1))

    flat = np.zeros((cin, ntot + 2 * margin))
    flat[:, margin:margin + ntot].reshape(cin, D + 2, H + 2, W + 2)[interior] = np.moveaxis(x.value, 3, 0)
    cols = np.empty((27, cin, ntot))
    for t, off in enumerate(offsets):
        cols[t] = flat[:, off:off + ntot]
    cols = cols.reshape(27 * cin, ntot)
    wmat = weight.value.transpose(0, 2, 3, 4, 1).reshape(cout, 27 * cin)
    out = (wmat @ cols).reshape(cout, D + 2, H + 2, W + 2)[interior]
    out = np.moveaxis(out, 0, 3)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
        out = out + bias.value

    def bw(g):
        gpad = np.zeros((cout, D + 2, H + 2, W + 2))
        gpad[interior] = np.moveaxis(g, 3, 0)
        gpad = gpad.reshape(cout, ntot)
        gx = gw = None
        if weight.requires_grad:
            gw = (gpad @ cols.T).reshape(cout, 3, 3, 3, cin).transpose(0, 4, 1, 2, 3)
        if x.requires_grad:
            gcols = (wmat.T @ gpad).reshape(27, cin, ntot)
            gflat = np.zeros((cin, ntot + 2 * margin))
            for t, off in enumerate(offsets):
                gflat[:, off:off + ntot] += gcols[t]
            gx = np.moveaxis(gflat[:, margin:margin + ntot].reshape(cin, D + 2, H + 2, W + 2)[interior], 0, 3)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return make_node(np.ascontiguousarray(out), parents, bw, "conv3d")


# --------------------------------------------------------------------------
# grid sampling (cell-centre aligned, edge-clamped)


def _axis_coords(x: np.ndarray, n: int):
    """Continuous cell coordinate, clamped; returns (i0, t, d t/d coord mask)."""
    inside = (x >= 0.0) & (x <= n - 1)
    u = np.clip(x, 0.0, n - 1)
    i0 = np.minimum(np.floor(u), n - 2).astype(np.int64)
    return i0, u - i0, inside


def trilinear_sample(grid, points) -> Tensor:
    """Sample a (R, R, R, C) grid over the cube [-0.5, 0.5]^3 at (N, 3) points.

    Cell (i, j, k) has its centre at -0.5 + (idx + 0.5) / R along (x, y, z).
    Points outside the hull of cell centres are clamped onto it, so the
    gradient w.r.t. the coordinate is zero there.
    """
    grid, points = as_tensor(grid), as_tensor(points)
    R = grid.shape[0]
    if grid.value.ndim != 4 or grid.shape[:3] != (R, R, R):
        raise ValueError(f"trilinear_sample expects a cubic (R,R,R,C) grid, got {grid.shape}")
    if R < 2:
        raise ValueError("grid resolution must be >= 2")
    C = grid.shape[3]
    p = points.value.reshape(-1, 3)
    coords = [_axis_coords((p[:, k] + 0.5) * R - 0.5, R) for k in range(3)]
    (ix, tx, mx), (iy, ty, my), (iz, tz, mz) = coords
    flat = grid.value.reshape(-1, C)
    corners = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wx = tx if dx else 1.0 - tx
                wy = ty if dy else 1.0 - ty
                wz = tz if dz else 1.0 - tz
                idx = ((ix + dx) * R + (iy + dy)) * R + (iz + dz)
                corners.append((dx, dy, dz, idx, wx, wy, wz))
    out = np.zeros((len(p), C))
    for _, _, _, idx, wx, wy, wz in corners:
        out += (wx * wy * wz)[:, None] * flat[idx]

    def bw(g):
        g = g.reshape(-1, C)
        ggrid = gp = None
        if grid.requires_grad:
            acc = np.zeros_like(flat)
            for _, _, _, idx, wx, wy, wz in corners:
                contrib = (wx * wy * wz)[:, None] * g
                for ch in range(C):
                    acc[:, ch] += np.bincount(idx, weights=contrib[:, ch], minlength=len(flat))
            ggrid = acc.reshape(grid.shape)
        if points.requires_grad:
            gp = np.zeros((len(p), 3))
            for dx, dy, dz, idx, wx, wy, wz in corners:
                proj = np.sum(flat[idx] * g, axis=1)
                gp[:, 0] += (1.0 if dx else -1.0) * wy * wz * proj
                gp[:, 1] += (1.0 if dy else -1.0) * wx * wz * proj
                gp[:, 2] += (1.0 if dz else -1.0) * wx * wy * proj
            gp *= R * np.stack([mx, my, mz], axis=1)
            gp = gp.reshape(points.shape)
        return ggrid, gp

    return make_node(out.reshape(points.shape[:-1] + (C,)), (grid, points), bw, "trilinear")


def bilinear_sample(fmap, uv) -> Tensor:
    """Sample an (H, W, C) map at (N, 2) uv in [0, 1]^2 (u across columns, v down rows).

    Texel (r, c) has its centre at uv = ((c + 0.5) / W, (r + 0.5) / H).
    """
    fmap, uv = as_tensor(fmap), as_tensor(uv)
    if fmap.value.ndim != 3:
        raise ValueError(f"bilinear_sample expects an (H,W,C) map, got {fmap.shape}")
    H, W, C = fmap.shape
    if H < 2 or W < 2:
        raise ValueError("feature map must be at least 2x2")
    q = uv.value.reshape(-1, 2)
    ic, tc, mc = _axis_coords(q[:, 0] * W - 0.5, W)
    ir, tr, mr = _axis_coords(q[:, 1] * H - 0.5, H)
    flat = fmap.value.reshape(-1, C)
    corners = []
    for dr in (0, 1):
        for dc in (0, 1):
            wr = tr if dr else 1.0 - tr
            wc = tc if dc else 1.0 - tc
            corners.append((dr, dc, (ir + dr) * W + (ic + dc), wr, wc))
    out = np.zeros((len(q), C))
    for _, _, idx, wr, wc in corners:
        out += (wr * wc)[:, None] * flat[idx]

    def bw(g):
        g = g.reshape(-1, C)
        gmap = guv = None
        if fmap.requires_grad:
            acc = np.zeros_like(flat)
            for _, _, idx, wr, wc in corners:
                contrib = (wr * wc)[:, None] * g
                for ch in range(C):
                    acc[:, ch] += np.bincount(idx, weights=contrib[:, ch], minlength=len(flat))
            gmap = acc.reshape(fmap.shape)
        if uv.requires_grad:
            guv = np.zeros((len(q), 2))
            for dr, dc, idx, wr, wc in corners:
                proj = np.sum(flat[idx] * g, axis=1)
                guv[:, 0] += (1.0 if dc else -1.0) * wr * proj
                guv[:, 1] += (1.0 if dr else -1.0) * wc * proj
            guv *= np.stack([W * mc, H * mr], axis=1)
            guv = guv.reshape(uv.shape)
        return gmap, guv

    return make_node(out.reshape(uv.shape[:-1] + (C,)), (fmap, uv), bw, "bilinear")


# --------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, grad: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``output``.

    Leaf gradients are accumulated into ``leaf.grad`` and also returned as a
    ``{leaf: gradient}`` mapping for this sweep alone.
    """
    if grad is None:
        if output.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        grad = np.ones(output.shape)
    if not output.requires_grad:
        return {}
    cotangents: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=np.float64)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(output)):
        g = cotangents.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in cotangents:
                cotangents[key] = cotangents[key] + pg
            else:
                cotangents[key] = np.array(pg, dtype=np.float64).reshape(parent.shape)
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar w.r.t. ``wrt`` without touching ``.grad``."""
    saved = [(t, t.grad) for t in wrt]
    for t in wrt:
        t.grad = None
    try:
        got = backward(output)
        return [got.get(t, np.zeros(t.shape)) for t in wrt]
    finally:
        for t, g in saved:
            t.grad = g


# --------------------------------------------------------------------------
# numeric spatial gradient


def fd_spatial_grad(f: Callable, points, h: float = 1e-3) -> Tensor:
    """Central-difference spatial gradient of a batched scalar field.

    ``f`` maps an (M, 3) array of points to M values (Tensor or array).
    All 6 shifted copies are evaluated in one call, so when ``f`` builds a
    graph the result is differentiable w.r.t. whatever ``f`` depends on.
    Returns shape (N, 3), or (3,) for a single point.
    """
    if not h > 0.0:
        raise ValueError("finite-difference step must be positive")
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    n = len(p)
    shifts = np.concatenate([np.eye(3) * h, -np.eye(3) * h])  # +x,+y,+z,-x,-y,-z
    shifted = (p[None, :, :] + shifts[:, None, :]).reshape(-1, 3)
    vals = reshape(as_tensor(f(shifted)), (6, n))
    g = scale(sub(index(vals, slice(0, 3)), index(vals, slice(3, 6))), 0.5 / h)
    g = transpose(g)
    return reshape(g, (3,)) if single else g

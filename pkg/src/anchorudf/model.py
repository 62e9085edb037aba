"""The anchored unsigned distance field.

For a query point p the decoder sees ``[conditioning feature, position
feature, p]``. The position feature is trilinearly sampled from a 3D feature
grid computed by a small conv net over the voxelized anchor set, so it encodes
where p sits relative to the anchors. The conditioning feature is either a
learnable per-shape latent code or a bilinear sample of a learnable per-shape
feature map at the orthographic projection of p.

Parameters live in an ordered ``{name: Tensor}`` dict. Names are grouped by
prefix: ``code``/``feature_map`` (conditioning), ``anchor.*`` (anchor head),
``conv.*`` (grid encoder) and ``dec.*`` (decoder).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSet
from .autodiff import Tensor, bilinear_sample, trilinear_sample
from .errors import DataError

CONDITIONING_MODES = ("latent_code", "pixel_aligned")
_EVAL_CHUNK = 8192


@dataclass
class ModelConfig:
    k_anchors: int = 600
    grid_res: int = 32
    conv_layers: int = 3
    c_pos: int = 16
    conditioning: str = "latent_code"
    code_dim: int = 64
    feature_map: tuple[int, int, int] = (64, 64, 16)  # H, W, C
    projection_axis: int = 2
    decoder_layers: int = 6
    decoder_hidden: int = 256
    skip_layer: int = 3
    anchor_hidden: int = 256
    delta: float = 0.2
    n_shapes: int = 1

    def __post_init__(self):
        self.feature_map = tuple(int(v) for v in self.feature_map)
        if self.grid_res < 4:
            raise DataError("grid_res must be >= 4")
        if self.k_anchors < 1:
            raise DataError("k_anchors must be >= 1")
        if self.conditioning not in CONDITIONING_MODES:
            raise DataError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.conv_layers < 1 or self.decoder_layers < 2:
            raise DataError("need >= 1 conv layer and >= 2 decoder layers")
        if not 1 <= self.skip_layer <= self.decoder_layers:
            raise DataError("skip_layer must index a decoder layer")
        if self.n_shapes < 1:
            raise DataError("n_shapes must be >= 1")
        if self.projection_axis not in (0, 1, 2):
            raise DataError("projection_axis must be 0, 1 or 2")

    @property
    def conv_channels(self) -> list[int]:
        """Output widths per conv layer: 8, 16, 16, ..., ending at ``c_pos``."""
        hidden = [min(8 * 2 ** i, 16) for i in range(self.conv_layers - 1)]
        return hidden + [self.c_pos]

    @property
    def cond_dim(self) -> int:
        return self.code_dim if self.conditioning == "latent_code" else self.feature_map[2]

    @property
    def decoder_in(self) -> int:
        return self.cond_dim + self.c_pos + 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_map"] = list(self.feature_map)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class CameraProjection:
    """Orthographic view along ``axis``; normalized coordinates map to uv in [0, 1]^2."""

    axis: int = 2
    scale: float = 1.0

    @property
    def plane_axes(self) -> tuple[int, int]:
        return tuple(a for a in range(3) if a != self.axis)

    def matrix(self) -> np.ndarray:
        m = np.zeros((2, 3))
        a, b = self.plane_axes
        m[0, a] = self.scale
        m[1, b] = self.scale
        return m

    def __call__(self, points) -> Tensor:
        return ad.linear(points, self.matrix(), np.full(2, 0.5))

    def unproject(self, uv, depth) -> np.ndarray:
        """Inverse on the image: uv plus the dropped coordinate back to 3D."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        out = np.empty((len(uv), 3))
        a, b = self.plane_axes
        out[:, a] = (uv[:, 0] - 0.5) / self.scale
        out[:, b] = (uv[:, 1] - 0.5) / self.scale
        out[:, self.axis] = depth
        return out


# --------------------------------------------------------------------------
# anchor grid


def voxelize_anchors(anchors, res: int) -> np.ndarray:
    """Binary (res, res, res) occupancy over [-0.5, 0.5]^3; outside points clamp to border cells."""
    pts = anchors.points if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    cells = np.clip(np.floor((pts + 0.5) * res), 0, res - 1).astype(np.int64)
    grid = np.zeros((res, res, res))
    grid[cells[:, 0], cells[:, 1], cells[:, 2]] = 1.0
    return grid


def cell_centers(res: int) -> np.ndarray:
    """(res, res, res, 3) coordinates of cell centres."""
    c = -0.5 + (np.arange(res) + 0.5) / res
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def encode_grid(grid, conv_params: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Stack of 3x3x3 zero-padded convolutions, ReLU between layers, none after the last."""
    x = ad.as_tensor(grid)
    if x.value.ndim == 3:
        x = ad.reshape(x, x.shape + (1,))
    for i, (w, b) in enumerate(conv_params):
        x = ad.conv3d(x, w, b)
        if i < len(conv_params) - 1:
            x = ad.relu(x)
    return x


# --------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Weights and biases uniform in +-1/sqrt(fan_in); codes and feature maps N(0, 0.01^2)."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    S = config.n_shapes
    if config.conditioning == "latent_code":
        arrays["code"] = rng.normal(0.0, 0.01, size=(S, config.code_dim))
    else:
        arrays["feature_map"] = rng.normal(0.0, 0.01, size=(S,) + config.feature_map)

    head = [(config.cond_dim, config.anchor_hidden), (config.anchor_hidden, 3 * config.k_anchors)]
    for i, (fi, fo) in enumerate(head):
        arrays[f"anchor.{i}.weight"] = _uniform(rng, (fo, fi), fi)
        arrays[f"anchor.{i}.bias"] = _uniform(rng, (fo,), fi)

    cin = 1
    for i, cout in enumerate(config.conv_channels):
        fan_in = cin * 27
        arrays[f"conv.{i}.weight"] = _uniform(rng, (cout, cin, 3, 3, 3), fan_in)
        arrays[f"conv.{i}.bias"] = _uniform(rng, (cout,), fan_in)
        cin = cout

    for i, (fi, fo) in enumerate(decoder_shapes(config)):
        arrays[f"dec.{i}.weight"] = _uniform(rng, (fo, fi), fi)
        arrays[f"dec.{i}.bias"] = _uniform(rng, (fo,), fi)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def decoder_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    """(fan_in, fan_out) per decoder layer; layer ``skip_layer`` (1-based) also sees the input block."""
    shapes = []
    for layer in range(1, config.decoder_layers + 1):
        fi = config.decoder_in if layer == 1 else config.decoder_hidden
        if layer == config.skip_layer and layer > 1:
            fi += config.decoder_in
        fo = 1 if layer == config.decoder_layers else config.decoder_hidden
        shapes.append((fi, fo))
    return shapes


def param_group(name: str) -> str:
    if name in ("code", "feature_map"):
        return "conditioning"
    return {"anchor": "anchor_head", "conv": "conv", "dec": "decoder"}[name.split(".")[0]]


# --------------------------------------------------------------------------
# the field


class AnchorUDF:
    """Callable field bound to a config and a parameter dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.camera = CameraProjection(axis=config.projection_axis)
        expected = init_params(config, 0) if params is not None else None
        if expected is not None:
            for k, t in expected.items():
                if k not in self.params or self.params[k].shape != t.shape:
                    got = self.params[k].shape if k in self.params else None
                    raise DataError(f"parameter {k!r}: expected shape {t.shape}, got {got}")

    def frozen(self) -> "AnchorUDF":
        """Same values, no gradient tracking (cheaper inference)."""
        m = AnchorUDF.__new__(AnchorUDF)
        m.config = self.config
        m.camera = self.camera
        m.params = {k: Tensor(t.value, name=k) for k, t in self.params.items()}
        return m

    # conditioning -----------------------------------------------------

    def conditioning(self, shape: int = 0) -> Tensor:
        name = "code" if self.config.conditioning == "latent_code" else "feature_map"
        return ad.index(self.params[name], shape)

    def _pooled_conditioning(self, shape: int) -> Tensor:
        cond = self.conditioning(shape)
        if self.config.conditioning == "latent_code":
            return cond
        return ad.mean(cond, axis=(0, 1))

    def predict_anchors(self, shape: int = 0) -> Tensor:
        """(K, 3) anchor coordinates regressed from the conditioning."""
        P = self.params
        h = ad.relu(ad.linear(self._pooled_conditioning(shape), P["anchor.0.weight"], P["anchor.0.bias"]))
        out = ad.linear(h, P["anchor.1.weight"], P["anchor.1.bias"])
        return ad.reshape(out, (self.config.k_anchors, 3))

    def conv_params(self) -> list[tuple[Tensor, Tensor]]:
        return [(self.params[f"conv.{i}.weight"], self.params[f"conv.{i}.bias"])
                for i in range(self.config.conv_layers)]

    def feature_grid(self, anchors) -> Tensor:
        return encode_grid(voxelize_anchors(anchors, self.config.grid_res), self.conv_params())

    # decoding ---------------------------------------------------------

    def decode(self, points, grid: Tensor, shape: int = 0) -> Tensor:
        """Field values (N,) at (N, 3) points given a precomputed feature grid."""
        pts = ad.as_tensor(points)
        n = pts.shape[0]
        if self.config.conditioning == "latent_code":
            cond = ad.broadcast_to(self.conditioning(shape), (n, self.config.code_dim))
        else:
            cond = bilinear_sample(self.conditioning(shape), self.camera(pts))
        phi_pos = trilinear_sample(grid, pts)
        x0 = ad.concat([cond, phi_pos, pts], axis=1)
        h = x0
        L = self.config.decoder_layers
        for layer in range(1, L + 1):
            if layer == self.config.skip_layer and layer > 1:
                h = ad.concat([h, x0], axis=1)
            h = ad.relu(ad.linear(h, self.params[f"dec.{layer - 1}.weight"], self.params[f"dec.{layer - 1}.bias"]))
        return ad.reshape(h, (n,))

    def forward(self, points, shape: int = 0, anchors=None) -> Tensor:
        """Evaluate at (N, 3) points; anchors default to the predicted set."""
        if anchors is None:
            anchors = self.predict_anchors(shape).value
        return self.decode(points, self.feature_grid(anchors), shape)

    __call__ = forward

    # inference helpers ------------------------------------------------

    def evaluate(self, points, grid: Tensor, shape: int = 0) -> np.ndarray:
        frozen = self if not any(t.requires_grad for t in self.params.values()) else self.frozen()
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = Tensor(grid.value)
        out = [frozen.decode(pts[s:s + _EVAL_CHUNK], g, shape).value for s in range(0, len(pts), _EVAL_CHUNK)]
        return np.concatenate(out) if out else np.zeros(0)

    def spatial_grad(self, points, grid: Tensor, shape: int = 0) -> np.ndarray:
        """Exact reverse-mode gradient of the field w.r.t. each query point, (N, 3)."""
        frozen = self if not any(t.requires_grad for t in self.params.values()) else self.frozen()
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = Tensor(grid.value)
        out = np.zeros_like(pts)
        for s in range(0, len(pts), _EVAL_CHUNK):
            leaf = Tensor(pts[s:s + _EVAL_CHUNK], requires_grad=True)
            val = frozen.decode(leaf, g, shape)
            # each output depends only on its own point, so d(sum)/dp_i = df(p_i)/dp_i
            got = ad.backward(ad.tsum(val))
            if leaf in got:
                out[s:s + _EVAL_CHUNK] = got[leaf]
        return out

    def field_fns(self, shape: int = 0, anchors=None):
        """(udf_fn, grad_fn) closures over fixed anchors, for extraction."""
        frozen = self.frozen()
        if anchors is None:
            anchors = frozen.predict_anchors(shape).value
        grid = frozen.feature_grid(anchors)
        return (lambda P: frozen.evaluate(P, grid, shape)), (lambda P: frozen.spatial_grad(P, grid, shape))


def spatial_grad(model: AnchorUDF, points, shape: int = 0, anchors=None) -> np.ndarray:
    if anchors is None:
        anchors = model.predict_anchors(shape).value
    return model.spatial_grad(points, model.feature_grid(anchors), shape)


def forward(points, model: AnchorUDF, shape: int = 0, anchors=None) -> Tensor:
    return model.forward(points, shape, anchors)


def predict_anchors(model: AnchorUDF, shape: int = 0) -> AnchorSet:
    return AnchorSet(model.predict_anchors(shape).value)

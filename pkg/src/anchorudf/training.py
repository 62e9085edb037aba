"""Losses, RMSprop, the two-phase training loop and the checkpoint format.

Phase 1 minimises the clamped L1 distance loss plus the anchor Chamfer loss.
From ``gda_start_epoch`` on, the gradient-direction term is added and (by
default) the conv encoder and anchor head are frozen, so only the decoder and
the conditioning keep learning.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .anchors import DEFAULT_SOURCE_SAMPLES, chamfer_sq_tensor, kmeans_anchors
from .autodiff import Tensor
from .errors import DataError, FormatError, NonFiniteLossError
from .geometry import SpatialIndex, TriangleMesh, build_index, sample_surface
from .model import AnchorUDF, ModelConfig, param_group
from .sampling import DEFAULT_MIXTURE, SamplingMixture, TrainingSet, epoch_batches, generate_training_set

log = logging.getLogger(__name__)

ANCHOR_SOURCES = ("target", "predicted")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 512
    shapes_per_step: int = 4
    epochs: int = 60
    lr_decay: float = 0.1
    lr_decay_epoch: int | None = None
    lambda1: float = 1.0
    lambda2: float = 0.02
    delta: float = 0.2
    gda_start_epoch: int | None = None  # None: the last 10 epochs
    gda_fd_step: float = 1e-3
    gda_max_distance: float | None = None  # None: delta
    freeze_encoders_during_gda: bool = True
    anchor_source: str = "target"  # anchors voxelized during training
    rmsprop_rho: float = 0.99
    rmsprop_eps: float = 1e-8
    seed: int = 42

    def __post_init__(self):
        if not self.lr > 0.0:
            raise DataError("lr must be positive")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise DataError("loss weights must be non-negative")
        if not self.delta > 0.0:
            raise DataError("delta must be positive")
        if self.batch_size < 1 or self.shapes_per_step < 1 or self.epochs < 0:
            raise DataError("batch_size and shapes_per_step must be >= 1, epochs >= 0")
        if not self.gda_fd_step > 0.0:
            raise DataError("gda_fd_step must be positive")
        if self.anchor_source not in ANCHOR_SOURCES:
            raise DataError(f"anchor_source must be one of {ANCHOR_SOURCES}")

    @property
    def gda_start(self) -> int:
        return max(self.epochs - 10, 0) if self.gda_start_epoch is None else self.gda_start_epoch

    @property
    def gda_band(self) -> float:
        return self.delta if self.gda_max_distance is None else self.gda_max_distance

    def in_phase2(self, epoch: int) -> bool:
        """Phase 2 (encoders frozen if configured) starts at ``gda_start`` whatever lambda2 is."""
        return epoch >= self.gda_start

    def gda_active(self, epoch: int) -> bool:
        """Whether the gradient-direction term is evaluated; skipped when its weight is 0."""
        return self.lambda2 > 0.0 and self.in_phase2(epoch)

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_epoch is not None and epoch >= self.lr_decay_epoch:
            return self.lr * self.lr_decay
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# losses


def loss_udf(preds: Tensor, targets, delta: float) -> Tensor:
    """Sum of |min(pred, delta) - min(target, delta)| over the batch."""
    t = np.minimum(np.asarray(targets, dtype=np.float64), delta)
    return ad.tsum(ad.tabs(ad.sub(ad.minimum(preds, delta), t)))


def loss_udf_mean(preds: Tensor, targets, delta: float) -> float:
    return float(loss_udf(preds, targets, delta).value) / max(len(np.atleast_1d(targets)), 1)


def loss_ap(predicted, target) -> Tensor:
    """Chamfer loss between predicted anchors (Tensor or array) and targets."""
    if not isinstance(predicted, Tensor):
        points = getattr(predicted, "points", predicted)
        predicted = Tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return chamfer_sq_tensor(predicted, getattr(target, "points", target))


def loss_gda(field_fn: Callable, points, dirs, h: float = 1e-3) -> Tensor:
    """Sum of 1 - cos(numeric spatial gradient, true direction).

    A zero numeric gradient has cosine 0, i.e. contributes 1.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return Tensor(0.0)
    g = ad.fd_spatial_grad(field_fn, pts, h)
    cos = ad.cosine_similarity(g, np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    return ad.tsum(ad.sub(1.0, cos))


def total_loss(l_udf, l_ap, l_gda, lambda1: float, lambda2: float, gda_active: bool = True):
    total = ad.add(l_udf, ad.scale(l_ap, lambda1))
    if gda_active:
        total = ad.add(total, ad.scale(l_gda, lambda2))
    return total


# --------------------------------------------------------------------------
# optimizer


def rmsprop_step(param: np.ndarray, grad: np.ndarray, v: np.ndarray, lr: float,
                 rho: float = 0.99, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """One RMSprop update; returns new (param, v)."""
    if param.shape != grad.shape or param.shape != v.shape:
        raise ValueError(f"rmsprop shape mismatch: {param.shape}, {grad.shape}, {v.shape}")
    v = rho * v + (1.0 - rho) * grad * grad
    return param - lr * grad / (np.sqrt(v) + eps), v


class RMSprop:
    def __init__(self, params: dict[str, Tensor], rho: float = 0.99, eps: float = 1e-8,
                 state: dict[str, np.ndarray] | None = None):
        self.params = params
        self.rho = rho
        self.eps = eps
        self.state = state if state is not None else {k: np.zeros(t.shape) for k, t in params.items()}

    def step(self, lr: float, names: Sequence[str] | None = None) -> None:
        for name in (names if names is not None else self.params):
            t = self.params[name]
            g = t.grad if t.grad is not None else np.zeros(t.shape)
            t.value, self.state[name] = rmsprop_step(t.value, g, self.state[name], lr, self.rho, self.eps)


# --------------------------------------------------------------------------
# checkpoint format
#
#   magic "AUDFCKPT" | u32 version | u64 n | n bytes canonical JSON header
#   | per array in header["arrays"] order: u64 n | n bytes little-endian f64

_CKPT_MAGIC = b"AUDFCKPT"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    anchor_targets: list[np.ndarray]
    epoch: int = 0  # completed epochs
    history: list[dict] = field(default_factory=list)
    mesh_ids: list[str] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.train_config.seed

    def model(self) -> AnchorUDF:
        params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return AnchorUDF(self.model_config, params)

    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{k}", v) for k, v in self.params.items()]
        out += [(f"opt/{k}", v) for k, v in self.optimizer.items()]
        out += [(f"anchors/{i}", a) for i, a in enumerate(self.anchor_targets)]
        return out

    def to_bytes(self) -> bytes:
        arrays = self._arrays()
        header = {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "epoch": self.epoch,
            "history": self.history,
            "mesh_ids": self.mesh_ids,
            "seed": self.seed,
            "arrays": [[name, list(a.shape)] for name, a in arrays],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [_CKPT_MAGIC, struct.pack("<IQ", _CKPT_VERSION, len(blob)), blob]
        for _, a in arrays:
            raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
            parts += [struct.pack("<Q", len(raw)), raw]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != _CKPT_MAGIC:
            raise FormatError("not a checkpoint file")
        try:
            version, n = struct.unpack_from("<IQ", blob, 8)
            if version != _CKPT_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            off = 20
            header = json.loads(blob[off:off + n].decode("utf-8"))
            off += n
            arrays = {}
            for name, shape in header["arrays"]:
                (size,) = struct.unpack_from("<Q", blob, off)
                off += 8
                if size != 8 * int(np.prod(shape, dtype=np.int64)) or off + size > len(blob):
                    raise FormatError(f"checkpoint array {name!r} is truncated or mis-sized")
                arrays[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
                off += size
        except (struct.error, ValueError, KeyError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"corrupt checkpoint: {exc}") from None
        if off != len(blob):
            raise FormatError("trailing bytes after checkpoint arrays")
        pick = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        anchors = pick("anchors/")
        return cls(
            model_config=ModelConfig.from_dict(header["model_config"]),
            train_config=TrainConfig.from_dict(header["train_config"]),
            params=pick("param/"),
            optimizer=pick("opt/"),
            anchor_targets=[anchors[str(i)] for i in range(len(anchors))],
            epoch=int(header["epoch"]),
            history=header["history"],
            mesh_ids=list(header["mesh_ids"]),
        )

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# --------------------------------------------------------------------------
# data preparation


@dataclass
class ShapeData:
    samples: TrainingSet
    anchor_targets: np.ndarray  # (K, 3)
    mesh_id: str = ""
    index: SpatialIndex | None = None


def prepare_shape(mesh: TriangleMesh, k_anchors: int, n_samples: int = 5000,
                  mixture: SamplingMixture = DEFAULT_MIXTURE, delta: float = 0.2, seed: int = 42,
                  mesh_id: str = "", kmeans_samples: int = DEFAULT_SOURCE_SAMPLES,
                  kmeans_iters: int = 100, index: SpatialIndex | None = None) -> ShapeData:
    """Training samples and k-means anchor targets for one normalized mesh."""
    index = index if index is not None else build_index(mesh)
    ts = generate_training_set(index, mesh, n_samples, mixture, delta, seed, mesh_id)
    surface, _ = sample_surface(mesh, kmeans_samples, seed + 1)
    anchors = kmeans_anchors(surface, k_anchors, kmeans_iters, seed + 2)
    return ShapeData(ts, anchors.points, mesh_id, index)


def shape_from_training_set(ts: TrainingSet, k_anchors: int, kmeans_iters: int = 100, seed: int = 42) -> ShapeData:
    """Anchor targets from the samples' own closest surface points (no mesh needed)."""
    feet = ts.p - ts.udf_raw[:, None] * ts.dir
    anchors = kmeans_anchors(feet, k_anchors, kmeans_iters, seed + 2)
    return ShapeData(ts, anchors.points, ts.mesh_id)


# --------------------------------------------------------------------------
# training loop

_ENCODER_GROUPS = ("conv", "anchor_head")


def _alignment_probe(ts: TrainingSet, band: float, seed: int, n: int = 256) -> np.ndarray:
    idx = np.flatnonzero(ts.udf_raw <= band)
    rng = np.random.default_rng([seed, 0xA11])
    return np.sort(rng.permutation(idx)[:n])


def mean_alignment(model: AnchorUDF, points, dirs, shape: int = 0, anchors=None) -> float:
    """Mean cosine between the model's exact spatial gradient and true directions."""
    if len(points) == 0:
        return float("nan")
    frozen = model.frozen()
    if anchors is None:
        anchors = frozen.predict_anchors(shape).value
    g = frozen.spatial_grad(points, frozen.feature_grid(anchors), shape)
    return float(np.mean(ad.cosine_similarity(g, dirs).value))


def fit(shapes: Sequence[ShapeData], model_config: ModelConfig, train_config: TrainConfig,
        out_dir=None, resume: Checkpoint | None = None, keep_epoch_checkpoints: bool = False,
        stop_epoch: int | None = None) -> Checkpoint:
    """Train on one or more shapes and return the final checkpoint.

    With ``out_dir`` set, writes ``last.ckpt`` after every epoch (plus
    ``epoch_XXXX.ckpt`` if ``keep_epoch_checkpoints``), ``phase1.ckpt`` when
    the gradient-direction phase begins, ``final.ckpt`` and ``metrics.csv``.
    ``stop_epoch`` ends the run early (as if interrupted) after that many
    completed epochs.
    """
    cfg = train_config
    if len(shapes) != model_config.n_shapes:
        raise DataError(f"model config expects {model_config.n_shapes} shape(s), got {len(shapes)}")
    for s in shapes:
        if len(s.anchor_targets) != model_config.k_anchors:
            raise DataError("anchor target count does not match k_anchors")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        model = resume.model()
        opt = RMSprop(model.params, cfg.rmsprop_rho, cfg.rmsprop_eps,
                      {k: v.copy() for k, v in resume.optimizer.items()})
        start = resume.epoch
        history = [dict(h) for h in resume.history]
    else:
        model = AnchorUDF(model_config, seed=cfg.seed)
        opt = RMSprop(model.params, cfg.rmsprop_rho, cfg.rmsprop_eps)
        start = 0
        history = []

    targets = [np.asarray(s.anchor_targets, dtype=np.float64) for s in shapes]
    probes = [_alignment_probe(s.samples, cfg.gda_band, cfg.seed) for s in shapes]
    end = cfg.epochs if stop_epoch is None else min(cfg.epochs, stop_epoch)
    metrics_path = out / "metrics.csv" if out is not None else None
    if metrics_path is not None and start == 0:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "L_UDF", "L_AP", "L_GDA", "mean_cos", "wall_time"])

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(model_config, cfg, {k: t.value.copy() for k, t in model.params.items()},
                          {k: v.copy() for k, v in opt.state.items()}, targets, epoch,
                          [dict(h) for h in history], [s.mesh_id for s in shapes])

    for epoch in range(start, end):
        t0 = time.perf_counter()
        gda = cfg.gda_active(epoch)
        phase2 = cfg.in_phase2(epoch)
        frozen_groups = _ENCODER_GROUPS if phase2 and cfg.freeze_encoders_during_gda else ()
        if phase2 and epoch == cfg.gda_start and out is not None:
            snapshot(epoch).save(out / "phase1.ckpt")
        trainable = [k for k in model.params if param_group(k) not in frozen_groups]
        for k, t in model.params.items():
            t.requires_grad = k in trainable

        batches = [epoch_batches(len(s.samples), cfg.batch_size, cfg.seed + i, epoch) for i, s in enumerate(shapes)]
        n_steps = max(len(b) for b in batches)
        sums = {"L_UDF": 0.0, "L_AP": 0.0, "L_GDA": 0.0}
        count = 0
        cached_grids: dict[int, Tensor] = {}
        for step in range(n_steps):
            for group_start in range(0, len(shapes), cfg.shapes_per_step):
                group = range(group_start, min(group_start + cfg.shapes_per_step, len(shapes)))
                for t in model.params.values():
                    t.grad = None
                total = Tensor(0.0)
                parts = {"L_UDF": 0.0, "L_AP": 0.0, "L_GDA": 0.0}
                for s in group:
                    bl = batches[s]
                    idx = bl[step % len(bl)]
                    ts = shapes[s].samples
                    anchors = model.predict_anchors(s)
                    l_ap = chamfer_sq_tensor(anchors, targets[s])
                    if s in cached_grids:
                        grid = cached_grids[s]
                    else:
                        vox = targets[s] if cfg.anchor_source == "target" else anchors.value
                        grid = model.feature_grid(vox)
                        if cfg.anchor_source == "target" and not grid.requires_grad:
                            cached_grids[s] = grid
                    preds = model.decode(ts.p[idx], grid, s)
                    l_udf = loss_udf(preds, ts.udf_raw[idx], cfg.delta)
                    l_gda = Tensor(0.0)
                    if gda:
                        band = idx[ts.udf_raw[idx] <= cfg.gda_band]
                        l_gda = loss_gda(lambda q, g=grid, s=s: model.decode(q, g, s), ts.p[band], ts.dir[band],
                                         cfg.gda_fd_step)
                    total = ad.add(total, total_loss(l_udf, l_ap, l_gda, cfg.lambda1, cfg.lambda2, gda))
                    parts["L_UDF"] += float(l_udf.value)
                    parts["L_AP"] += float(l_ap.value)
                    parts["L_GDA"] += float(l_gda.value)
                if not np.isfinite(total.value).all():
                    state = {"epoch": epoch, "step": step, **parts}
                    if out is not None:
                        snapshot(epoch).save(out / "diagnostic.ckpt")
                        (out / "diagnostic.json").write_text(json.dumps(state, indent=2))
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, step {step}: {parts}", state)
                ad.backward(total)
                opt.step(cfg.lr_at(epoch), trainable)
                for k in parts:
                    sums[k] += parts[k]
                count += 1

        for t in model.params.values():
            t.requires_grad = True
            t.grad = None
        cos = [mean_alignment(model, s.samples.p[pr], s.samples.dir[pr], i,
                              targets[i] if cfg.anchor_source == "target" else None)
               for i, (s, pr) in enumerate(zip(shapes, probes))]
        record = {"epoch": epoch, **{k: v / max(count, 1) for k, v in sums.items()},
                  "mean_cos": float(np.mean(cos)), "gda": bool(gda)}
        history.append(record)
        wall = time.perf_counter() - t0
        log.info("epoch %d  L_UDF %.5f  L_AP %.5f  L_GDA %.5f  cos %.4f  (%.1fs)", epoch,
                 record["L_UDF"], record["L_AP"], record["L_GDA"], record["mean_cos"], wall)
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(record["L_UDF"]), repr(record["L_AP"]),
                                         repr(record["L_GDA"]), repr(record["mean_cos"]), f"{wall:.3f}"])
        if out is not None:
            ck = snapshot(epoch + 1)
            ck.save(out / "last.ckpt")
            if keep_epoch_checkpoints:
                ck.save(out / f"epoch_{epoch + 1:04d}.ckpt")

    final = snapshot(end)
    if out is not None and end == cfg.epochs:
        final.save(out / "final.ckpt")
    return final


def inference_anchors(ck: Checkpoint, model: AnchorUDF, shape: int = 0, source: str = "predicted") -> np.ndarray:
    if source == "predicted":
        return model.frozen().predict_anchors(shape).value
    if source == "target":
        return ck.anchor_targets[shape]
    raise DataError(f"anchor source must be 'predicted' or 'target', got {source!r}")

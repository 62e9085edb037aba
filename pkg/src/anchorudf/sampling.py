"""Near-surface training samples with clamped distance targets and direction labels.

Surface points are displaced by isotropic Gaussian noise whose sigma is picked
from a fixed mixture; each sample then gets its exact distance and the unit
direction pointing away from its closest surface point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DataError, FormatError
from .geometry import DIRECTION_EPSILON, SpatialIndex, SurfaceSampler, TriangleMesh

DEFAULT_DELTA = 0.2
MAX_REDRAWS = 100

_MAGIC = b"AUDFTSET"
_VERSION = 1
_RECORD = np.dtype([("p", "<f8", 3), ("udf_raw", "<f8"), ("udf_clamped", "<f8"), ("dir", "<f8", 3)])


@dataclass(frozen=True)
class SamplingMixture:
    components: tuple[tuple[float, float], ...] = ((0.01, 0.08), (0.49, 0.02), (0.50, 0.003))

    def __post_init__(self):
        comps = tuple((float(f), float(s)) for f, s in self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise DataError("mixture needs at least one component")
        if any(not 0.0 <= f <= 1.0 for f, _ in comps):
            raise DataError("mixture fractions must lie in [0, 1]")
        if any(not s > 0.0 for _, s in comps):
            raise DataError("mixture sigmas must be positive")
        if abs(sum(f for f, _ in comps) - 1.0) > 1e-9:
            raise DataError("mixture fractions must sum to 1")

    def counts(self, n: int) -> list[int]:
        """Split ``n`` slots across components (largest remainder, ties to the earlier one)."""
        raw = [f * n for f, _ in self.components]
        base = [int(np.floor(r)) for r in raw]
        rest = n - sum(base)
        order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
        for i in order[:rest]:
            base[i] += 1
        return base

    @classmethod
    def parse(cls, text: str) -> "SamplingMixture":
        """Parse ``"0.01:0.08,0.49:0.02,0.5:0.003"`` (fraction:sigma pairs)."""
        try:
            comps = tuple(tuple(float(x) for x in item.split(":")) for item in text.split(","))
        except ValueError:
            raise DataError(f"bad mixture specification {text!r}") from None
        if any(len(c) != 2 for c in comps):
            raise DataError(f"bad mixture specification {text!r}")
        return cls(comps)


DEFAULT_MIXTURE = SamplingMixture()


class TrainingSample(NamedTuple):
    p: np.ndarray
    udf_raw: float
    udf_clamped: float
    dir: np.ndarray


@dataclass
class TrainingSet:
    """Struct-of-arrays container; ``ts[i]`` yields a :class:`TrainingSample`."""

    p: np.ndarray
    udf_raw: np.ndarray
    udf_clamped: np.ndarray
    dir: np.ndarray
    delta: float
    mesh_id: str = ""
    seed: int = 0
    component: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.p)

    def __getitem__(self, i: int) -> TrainingSample:
        return TrainingSample(self.p[i], float(self.udf_raw[i]), float(self.udf_clamped[i]), self.dir[i])

    def subset(self, idx) -> "TrainingSet":
        comp = None if self.component is None else self.component[idx]
        return TrainingSet(self.p[idx], self.udf_raw[idx], self.udf_clamped[idx], self.dir[idx],
                           self.delta, self.mesh_id, self.seed, comp)


def generate_training_set(index: SpatialIndex, mesh: TriangleMesh, n: int,
                          mixture: SamplingMixture = DEFAULT_MIXTURE, delta: float = DEFAULT_DELTA,
                          seed: int = 0, mesh_id: str = "",
                          direction_epsilon: float | None = DIRECTION_EPSILON) -> TrainingSet:
    """Draw ``n`` displaced surface points with exact distance labels.

    Slot ``i`` uses its own generator seeded by ``(seed, i)``, so the result
    does not depend on how slots are batched. Points that land within
    ``direction_epsilon`` of the surface are redrawn from the same slot stream;
    pass ``None`` to keep them (their direction is then the zero vector).
    """
    if n < 1:
        raise DataError("sample count must be >= 1")
    if not delta > 0.0:
        raise DataError("delta must be positive")
    sampler = SurfaceSampler(mesh)
    sigmas = np.repeat([s for _, s in mixture.components], mixture.counts(n))
    component = np.repeat(np.arange(len(mixture.components)), mixture.counts(n))
    rngs = [np.random.default_rng([seed, i]) for i in range(n)]

    def draw(slots: np.ndarray) -> np.ndarray:
        out = np.empty((len(slots), 3))
        for j, i in enumerate(slots):
            surf, _ = sampler.draw(rngs[i], 1)
            out[j] = surf[0] + rngs[i].normal(0.0, sigmas[i], 3)
        return out

    slots = np.arange(n)
    p = draw(slots)
    q, d, _ = index.query(p)
    if direction_epsilon is not None:
        for _ in range(MAX_REDRAWS):
            bad = np.flatnonzero(d <= direction_epsilon)
            if len(bad) == 0:
                break
            p[bad] = draw(bad)
            q[bad], d[bad], _ = index.query(p[bad])
        else:
            if np.any(d <= direction_epsilon):
                raise DataError(f"could not draw off-surface samples after {MAX_REDRAWS} attempts")

    safe = np.where(d > 0.0, d, 1.0)
    dirs = np.where((d > 0.0)[:, None], (p - q) / safe[:, None], 0.0)
    return TrainingSet(p=p, udf_raw=d, udf_clamped=np.minimum(d, delta), dir=dirs, delta=float(delta),
                       mesh_id=mesh_id, seed=int(seed), component=component)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    perm = epoch_permutation(n, seed, epoch)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(ts: TrainingSet, batch_size: int, seed: int, epochs: int = 1,
               start_epoch: int = 0) -> Iterator[tuple[int, TrainingSet]]:
    """Yield ``(epoch, batch)``; each epoch is a fresh seeded permutation, last batch may be short."""
    for epoch in range(start_epoch, start_epoch + epochs):
        for idx in epoch_batches(len(ts), batch_size, seed, epoch):
            yield epoch, ts.subset(idx)


# --------------------------------------------------------------------------
# binary file format
#
#   magic "AUDFTSET" | u32 version | u64 count | f64 delta | i64 seed
#   | u32 len(mesh_id) | mesh_id utf-8 | count x record
#   record = 8 little-endian f64: p.xyz, udf_raw, udf_clamped, dir.xyz

_HEADER = struct.Struct("<8sIQdqI")


def save_training_set(ts: TrainingSet, path) -> None:
    rec = np.empty(len(ts), dtype=_RECORD)
    rec["p"] = ts.p
    rec["udf_raw"] = ts.udf_raw
    rec["udf_clamped"] = ts.udf_clamped
    rec["dir"] = ts.dir
    mid = ts.mesh_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, len(ts), ts.delta, ts.seed, len(mid)))
        fh.write(mid)
        fh.write(rec.tobytes())


def load_training_set(path) -> TrainingSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated training-set header")
    magic, version, count, delta, seed, nid = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise FormatError(f"{path}: not a training-set file")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported training-set version {version}")
    off = _HEADER.size + nid
    if len(blob) != off + count * _RECORD.itemsize:
        raise FormatError(f"{path}: expected {count} records, file size does not match")
    mesh_id = blob[_HEADER.size:off].decode("utf-8")
    rec = np.frombuffer(blob, dtype=_RECORD, count=count, offset=off)
    return TrainingSet(p=rec["p"].astype(np.float64), udf_raw=rec["udf_raw"].astype(np.float64),
                       udf_clamped=rec["udf_clamped"].astype(np.float64), dir=rec["dir"].astype(np.float64),
                       delta=float(delta), mesh_id=mesh_id, seed=int(seed))

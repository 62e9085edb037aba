"""Dense point clouds from an unsigned distance field by repeated projection.

Each projection step moves a point against the unit gradient by the field
value, ``p <- p - f(p) * g(p) / |g(p)|``. For an exact UDF a single step
lands on the surface; learned fields get several steps.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, ExtractionError
from .plyio import load_ply, save_ply  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

FieldFn = Callable[[np.ndarray], np.ndarray]


class DegenerateFieldWarning(UserWarning):
    """Almost every random seed point is accepted; the field is probably ~0 everywhere."""


class ExtractionShortfallWarning(UserWarning):
    pass


@dataclass
class ExtractConfig:
    n_init: int = 20_000
    steps: int = 5
    valid_distance: float = 0.007
    target_points: int = 100_000
    jitter_sigma: float = 0.015
    max_rounds: int = 20
    degenerate_fraction: float = 0.9

    def __post_init__(self):
        if self.steps < 1:
            raise DataError("steps must be >= 1")
        if not self.valid_distance > 0.0:
            raise DataError("valid_distance must be positive")
        if not self.jitter_sigma > 0.0:
            raise DataError("jitter_sigma must be positive")
        if self.n_init < 1 or self.target_points < 1 or self.max_rounds < 1:
            raise DataError("n_init, target_points and max_rounds must be >= 1")


@dataclass
class ExtractionReport:
    rounds: int = 0
    kept_fraction_round1: float = 0.0
    min_udf: float = float("inf")
    degenerate: bool = False
    shortfall: bool = False
    zero_gradient: int = 0
    kept_per_round: list[int] = field(default_factory=list)


def project_points(udf_fn: FieldFn, grad_fn: FieldFn, points, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``steps`` normalized-gradient projection steps.

    Returns the moved points and a flag per point that is set when a zero
    gradient was met (the point is left where it was at that step).
    """
    p = np.array(points, dtype=np.float64).reshape(-1, 3)
    flagged = np.zeros(len(p), dtype=bool)
    for _ in range(steps):
        f = udf_fn(p)
        g = grad_fn(p)
        norm = np.linalg.norm(g, axis=1)
        ok = norm > 0.0
        flagged |= ~ok
        unit = np.zeros_like(g)
        unit[ok] = g[ok] / norm[ok, None]
        p = p - f[:, None] * unit
    return p, flagged


def project_point(udf_fn: FieldFn, grad_fn: FieldFn, p, steps: int) -> tuple[np.ndarray, bool]:
    q, flagged = project_points(udf_fn, grad_fn, np.asarray(p, dtype=np.float64).reshape(1, 3), steps)
    return q[0], bool(flagged[0])


def extract_dense_cloud(udf_fn: FieldFn, grad_fn: FieldFn, config: ExtractConfig = ExtractConfig(),
                        seed: int = 0, return_report: bool = False):
    """Seed uniformly in [-0.5, 0.5]^3, project, keep points whose field value
    is below ``valid_distance``, then densify by re-projecting jittered copies
    of kept points until ``target_points`` are collected or ``max_rounds`` end.
    """
    rng = np.random.default_rng(seed)
    report = ExtractionReport()

    def project_and_filter(seeds: np.ndarray) -> np.ndarray:
        q, flagged = project_points(udf_fn, grad_fn, seeds, config.steps)
        f = udf_fn(q)
        report.zero_gradient += int(flagged.sum())
        if len(f):
            report.min_udf = min(report.min_udf, float(np.min(f)))
        return q[f < config.valid_distance]

    seeds = rng.uniform(-0.5, 0.5, size=(config.n_init, 3))
    kept = project_and_filter(seeds)
    report.rounds = 1
    report.kept_per_round.append(len(kept))
    report.kept_fraction_round1 = len(kept) / config.n_init
    if len(kept) == 0:
        raise ExtractionError(
            f"no point reached the valid distance {config.valid_distance:g} "
            f"(min predicted udf {report.min_udf:.4g})", {"min_udf": report.min_udf})
    if report.kept_fraction_round1 > config.degenerate_fraction:
        report.degenerate = True
        warnings.warn(f"{report.kept_fraction_round1:.1%} of uniform seeds accepted in round 1; "
                      "field looks degenerate", DegenerateFieldWarning, stacklevel=2)

    clouds = [kept]
    total = len(kept)
    while total < config.target_points and report.rounds < config.max_rounds:
        pool = np.concatenate(clouds)
        pick = rng.integers(len(pool), size=config.n_init)
        jittered = pool[pick] + rng.normal(0.0, config.jitter_sigma, size=(config.n_init, 3))
        new = project_and_filter(jittered)
        clouds.append(new)
        total += len(new)
        report.rounds += 1
        report.kept_per_round.append(len(new))

    cloud = np.concatenate(clouds)
    if len(cloud) < config.target_points:
        report.shortfall = True
        warnings.warn(f"extracted {len(cloud)} of {config.target_points} points after "
                      f"{report.rounds} rounds", ExtractionShortfallWarning, stacklevel=2)
    cloud = cloud[:config.target_points]
    log.info("extracted %d points in %d rounds", len(cloud), report.rounds)
    return (cloud, report) if return_report else cloud


def exact_field(index) -> tuple[FieldFn, FieldFn]:
    """(udf_fn, grad_fn) from the exact mesh oracle; the gradient is zero on the surface."""

    def udf_fn(p):
        return index.query(p)[1]

    def grad_fn(p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        q, d, _ = index.query(p)
        out = np.zeros_like(p)
        ok = d > 0.0
        out[ok] = (p[ok] - q[ok]) / d[ok, None]
        return out

    return udf_fn, grad_fn

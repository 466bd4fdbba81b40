"""Distances between empirical marginals, moment/regularity probes and rate fits.

Monte-Carlo standard errors are computed from per-replica statistics, since
replicas are the independent units; particles within a replica are not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalMarginal:
    samples: np.ndarray
    label: str = ""

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 2:
            raise MetricError(f"need an (M, d) sample array with M >= 2, got shape {s.shape}")
        if not np.isfinite(s).all():
            raise MetricError("samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def dim(self):
        return self.samples.shape[1]

    def __len__(self):
        return self.samples.shape[0]


def _as_marginal(x) -> EmpiricalMarginal:
    return x if isinstance(x, EmpiricalMarginal) else EmpiricalMarginal(x)


def wasserstein2_1d(a, b) -> float:
    """Exact W2 between equal-size 1-D empirical measures (sorted matching)."""
    a, b = _as_marginal(a), _as_marginal(b)
    if a.dim != 1 or b.dim != 1:
        raise MetricError("wasserstein2_1d needs one-dimensional samples")
    if len(a) != len(b):
        raise MetricError(f"sample counts differ: {len(a)} vs {len(b)}")
    d = np.sort(a.samples[:, 0]) - np.sort(b.samples[:, 0])
    return math.sqrt(float(np.mean(d * d)))


@dataclass(frozen=True)
class SlicedW2:
    value: float
    se: float
    directions: int


def wasserstein2_sliced(a, b, directions: int = 256, seed: int = 0) -> SlicedW2:
    """sqrt of the mean, over random unit directions, of squared 1-D W2 of projections."""
    a, b = _as_marginal(a), _as_marginal(b)
    if a.dim != b.dim:
        raise MetricError("dimension mismatch")
    if a.dim < 2:
        raise MetricError("use wasserstein2_1d for one-dimensional samples")
    if len(a) != len(b):
        raise MetricError(f"sample counts differ: {len(a)} vs {len(b)}")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((directions, a.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pa = np.sort(a.samples @ u.T, axis=0)
    pb = np.sort(b.samples @ u.T, axis=0)
    per_dir = np.mean((pa - pb) ** 2, axis=0)
    mean = float(per_dir.mean())
    value = math.sqrt(mean)
    se_sq = float(per_dir.std(ddof=1) / math.sqrt(directions)) if directions > 1 else 0.0
    se = se_sq / (2 * value) if value > 0 else 0.0
    return SlicedW2(value, se, directions)


@dataclass(frozen=True)
class MomentSeries:
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    q: int


def _per_replica(snapshots: np.ndarray) -> np.ndarray:
    s = np.asarray(snapshots, dtype=float)
    if s.ndim != 4:
        raise MetricError("snapshots must have shape (T, M, N, d)")
    return s


def _mean_se(values: np.ndarray, axis: int = -1):
    m = values.shape[axis]
    mean = values.mean(axis=axis)
    se = values.std(axis=axis, ddof=1) / math.sqrt(m) if m > 1 else np.zeros_like(mean)
    return mean, se


def moment_track(snapshots, times: Sequence[float], q: int = 2) -> MomentSeries:
    """E|X|^q per snapshot, pooled over particles, SE across replicas."""
    if q not in (2, 4):
        raise MetricError("q must be 2 or 4")
    s = _per_replica(snapshots)
    r2 = np.sum(s * s, axis=-1)
    per_rep = np.mean(r2 ** (q // 2), axis=2)  # (T, M)
    mean, se = _mean_se(per_rep)
    return MomentSeries(np.asarray(times, dtype=float), mean, se, q)


@dataclass(frozen=True)
class HolderPoint:
    dt: float
    msd: float
    se: float


def holder_probe(snapshots, times: Sequence[float], pairs: Sequence[tuple[int, int]]) -> list[HolderPoint]:
    """E|X(t2) - X(t1)|^2 for snapshot index pairs, pooled over particles."""
    s = _per_replica(snapshots)
    t = np.asarray(times, dtype=float)
    out = []
    for i1, i2 in pairs:
        d = s[i2] - s[i1]
        per_rep = np.mean(np.sum(d * d, axis=-1), axis=1)
        mean, se = _mean_se(per_rep)
        out.append(HolderPoint(abs(float(t[i2] - t[i1])), float(mean), float(se)))
    return out


@dataclass(frozen=True)
class HolderFit:
    linear: float
    linear_se: float
    quadratic: float
    quadratic_se: float


def holder_regression(snapshots, times: Sequence[float], pairs: Sequence[tuple[int, int]]) -> HolderFit:
    """Fit E|X(t2)-X(t1)|^2 ~ c1 |dt| + c2 dt^2 by least squares.

    The fit is done once per replica (on that replica's particle-averaged
    squared increments); coefficients are averaged over replicas and the SE is
    the spread across replicas.
    """
    s = _per_replica(snapshots)
    t = np.asarray(times, dtype=float)
    dts = np.array([abs(t[b] - t[a]) for a, b in pairs])
    y = np.stack([np.mean(np.sum((s[b] - s[a]) ** 2, axis=-1), axis=1) for a, b in pairs])  # (P, M)
    design = np.column_stack([dts, dts ** 2])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)  # (2, M)
    (c1, c2), (e1, e2) = _mean_se(coef)
    return HolderFit(float(c1), float(e1), float(c2), float(e2))


@dataclass(frozen=True)
class SlopeFit:
    kappas: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    r_squared: float


def fit_slope(points: Sequence[tuple[float, float]]) -> SlopeFit:
    """Least-squares line through (log kappa, log error)."""
    pts = [(float(k), float(e)) for k, e in points]
    if len(pts) < 3:
        raise MetricError("need at least three points")
    k = np.array([p[0] for p in pts])
    e = np.array([p[1] for p in pts])
    if np.any(k <= 0) or np.any(e <= 0):
        raise MetricError("kappas and errors must be positive for a log-log fit")
    lx, ly = np.log(k), np.log(e)
    mx, my = lx.mean(), ly.mean()
    sxx = np.sum((lx - mx) ** 2)
    if sxx == 0:
        raise MetricError("kappas must not all coincide")
    slope = float(np.sum((lx - mx) * (ly - my)) / sxx)
    intercept = float(my - slope * mx)
    resid = ly - (intercept + slope * lx)
    syy = np.sum((ly - my) ** 2)
    r2 = 1.0 - float(np.sum(resid ** 2) / syy) if syy > 0 else 1.0
    return SlopeFit(k, e, slope, intercept, r2)


def trend_slope(times: Sequence[float], per_replica: np.ndarray) -> tuple[float, float]:
    """Linear-regression slope of a (T, M) per-replica series in time, with SE across replicas."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(per_replica, dtype=float)
    tc = t - t.mean()
    slopes = (tc @ (y - y.mean(axis=0))) / np.sum(tc * tc)
    mean, se = _mean_se(slopes)
    return float(mean), float(se)

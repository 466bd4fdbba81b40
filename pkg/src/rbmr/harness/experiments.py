"""Replica orchestration and the experiments behind each CLI subcommand.

Replicas are processed in fixed-size chunks; chunks may run on a thread pool
but are always merged in replica order, and sums over replicas use
``math.fsum``. Outputs therefore do not depend on the worker count.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from ..coupling import coupled_core
from ..dynamics import (
    StepConfig,
    ContractError,
    draw_inputs,
    grid_index,
    sample_batches,
    simulate,
)
from ..lemma_lab import (
    ClockLawReport,
    validate_binomial_counts,
    validate_clock_gap_integral,
    validate_geometric_clock,
    validate_lln_variance,
)
from ..metrics import (
    MetricError,
    fit_slope,
    holder_regression,
    trend_slope,
    wasserstein2_1d,
    wasserstein2_sliced,
)
from ..model import ModelSpec
from ..streams import substream
from .config import ExperimentConfig

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# plumbing

def _chunks(m: int, size: int) -> list[np.ndarray]:
    return [np.arange(s, min(s + size, m)) for s in range(0, m, size)]


def map_chunks(fn: Callable, m: int, size: int, workers: int = 1) -> list:
    """Apply ``fn`` to consecutive replica-id chunks; results in chunk order."""
    chunks = _chunks(m, size)
    if workers <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def fsum_mean(values: np.ndarray) -> np.ndarray:
    """Column means over axis 0 with compensated summation, in row order."""
    v = np.asarray(values, dtype=float)
    return np.array([math.fsum(col) / v.shape[0] for col in v.reshape(v.shape[0], -1).T]).reshape(v.shape[1:])


def fsum_se(values: np.ndarray, mean: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    m = v.shape[0]
    c = (v - mean) ** 2
    var = np.array([math.fsum(col) for col in c.reshape(m, -1).T]).reshape(v.shape[1:]) / (m - 1)
    return np.sqrt(var / m)


def initial_positions(cfg: ExperimentConfig, ids: Sequence[int], slot: int = 0, n: int | None = None) -> np.ndarray:
    n = cfg.n if n is None else n
    return np.stack(
        [cfg.init_scale * substream(cfg.seed, int(r), "init", slot).standard_normal((n, cfg.d)) for r in ids]
    )


def sweep_slot(cfg: ExperimentConfig, kappa_index: int) -> int:
    """Stream slot for a sweep point: shared under common random numbers."""
    return 0 if cfg.crn else kappa_index + 1


def pseudo_index(k: int, n: int, p: int) -> int:
    """Grid index on the RBM-r axis that aligns with physical grid index k."""
    kr = k * n // p
    if kr * p != k * n:
        raise ContractError(f"pseudo-time (N/p) t is off the grid for grid index {k}")
    return kr


# --------------------------------------------------------------------------
# coupled strong error sweep

@dataclass
class KappaResult:
    kappa: float
    times: np.ndarray
    error: np.ndarray  # sqrt of pooled mean squared deviation, per eval time
    se: np.ndarray
    w2: np.ndarray  # W2 between first marginals, per eval time
    w2_se: np.ndarray
    first_error: np.ndarray  # coupled error of particle 0 only
    wall: float = 0.0

    @property
    def sup_index(self) -> int:
        return int(np.argmax(self.error))

    @property
    def sup_error(self) -> float:
        return float(self.error[self.sup_index])

    @property
    def sup_se(self) -> float:
        return float(self.se[self.sup_index])


def coupled_chunk(model: ModelSpec, cfg: ExperimentConfig, kappa: float, slot: int, ids: np.ndarray, times):
    """Coupled RBM-r / full-system runs for replicas ``ids``.

    Returns the particle-pooled squared deviation per replica and eval time,
    and the particle-0 positions of both systems at the eval times.
    """
    n, p, s, d = cfg.n, cfg.p, cfg.substeps, cfg.d
    steps = grid_index(cfg.horizon, kappa)
    k_total = pseudo_index(steps, n, p)
    x0 = initial_positions(cfg, ids, slot)
    batches = np.stack([sample_batches(n, p, k_total, substream(cfg.seed, int(r), "batch", slot)) for r in ids])
    counts = np.stack([np.bincount(b.ravel(), minlength=n) for b in batches])
    blocks = max(steps, int(counts.max()))
    noise = None
    if model.sigma > 0:
        noise = np.stack(
            [substream(cfg.seed, int(r), "noise", slot).standard_normal((blocks, n, s, d)) for r in ids]
        )
    ks = [grid_index(t, kappa) for t in times]
    krs = [pseudo_index(k, n, p) for k in ks]
    ips, rbmr, _ = coupled_core(model, x0, batches, noise, kappa / s, s, steps, ks, krs, ids)
    dev = np.sum((rbmr - ips) ** 2, axis=-1)  # (T, M, N)
    pooled = dev.mean(axis=2).T  # (M, T)
    first = dev[:, :, 0].T
    return pooled, first, rbmr[:, :, 0, :], ips[:, :, 0, :]


def coupled_kappa(model, cfg: ExperimentConfig, kappa: float, kappa_index: int) -> KappaResult:
    times = cfg.times()
    slot = sweep_slot(cfg, kappa_index)
    start = time.perf_counter()
    parts = map_chunks(
        lambda ids: coupled_chunk(model, cfg, kappa, slot, ids, times), cfg.replicas, cfg.chunk, cfg.worker_count()
    )
    wall = time.perf_counter() - start
    pooled = np.concatenate([q[0] for q in parts])
    first = np.concatenate([q[1] for q in parts])
    xr = np.concatenate([q[2] for q in parts], axis=1)  # (T, M, d)
    xi = np.concatenate([q[3] for q in parts], axis=1)
    msd = fsum_mean(pooled)
    msd_se = fsum_se(pooled, msd)
    err = np.sqrt(msd)
    se = np.where(err > 0, msd_se / (2 * np.where(err > 0, err, 1.0)), 0.0)
    first_err = np.sqrt(fsum_mean(first))
    w2 = np.empty(len(times))
    w2_se = np.zeros(len(times))
    for j in range(len(times)):
        if cfg.d == 1:
            w2[j] = wasserstein2_1d(xr[j], xi[j])
        else:
            sw = wasserstein2_sliced(xr[j], xi[j], cfg.w2_directions, cfg.seed)
            w2[j], w2_se[j] = sw.value, sw.se
    return KappaResult(kappa, np.asarray(times), err, se, w2, w2_se, first_err, wall)


def coupled_sweep(cfg: ExperimentConfig) -> list[KappaResult]:
    model = cfg.build_model()
    if model.test_only:
        raise ContractError(f"model {model.name!r} is test-only")
    out = []
    for j, kappa in enumerate(cfg.kappas):
        res = coupled_kappa(model, cfg, kappa, j)
        log.info("kappa=%g sup error=%.6g (se %.2g) in %.1fs", kappa, res.sup_error, res.sup_se, res.wall)
        out.append(res)
    return out


@dataclass
class RunRecord:
    config_hash: str
    results: list[KappaResult]
    slope: float | None
    intercept: float | None
    r_squared: float | None
    status: str
    lemma_reports: list = field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.sup_error for r in self.results])

    @property
    def strictly_decreasing(self) -> bool:
        e = self.errors
        return bool(np.all(e[1:] < e[:-1]))

    def dominance(self) -> list[bool]:
        """Per kappa: W2 <= coupled error + 3 SE at every eval time."""
        return [bool(np.all(r.w2 <= r.error + 3 * r.se + 3 * r.w2_se)) for r in self.results]


def converge(cfg: ExperimentConfig) -> RunRecord:
    if len(cfg.kappas) < 3:
        raise ContractError("converge needs at least three kappas")
    results = coupled_sweep(cfg)
    errs = [r.sup_error for r in results]
    if all(e == 0 for e in errs):
        return RunRecord(cfg.digest(), results, None, None, None, "degenerate: zero error")
    try:
        fit = fit_slope([(r.kappa, r.sup_error) for r in results])
    except MetricError as exc:
        return RunRecord(cfg.digest(), results, None, None, None, f"no fit: {exc}")
    return RunRecord(cfg.digest(), results, fit.slope, fit.intercept, fit.r_squared, "ok")


# --------------------------------------------------------------------------
# plain simulation

def simulate_chunk(model, cfg: ExperimentConfig, scheme: str, kappa: float, ids, times, slot: int = 0):
    n, p = cfg.n, cfg.p
    config = StepConfig(kappa, cfg.horizon, cfg.substeps, scheme)
    ks = [grid_index(t, kappa) for t in times]
    idx = ks if scheme != "rbmr" else [pseudo_index(k, n, p) for k in ks]
    pb = n if scheme == "ips" else p
    inputs = draw_inputs(
        model, n, pb, config,
        [substream(cfg.seed, int(r), "batch", slot) for r in ids],
        [substream(cfg.seed, int(r), "noise", slot) for r in ids],
        ids,
    )
    return simulate(model, initial_positions(cfg, ids, slot), config, inputs, idx)


def simulate_scheme(model, cfg: ExperimentConfig, scheme: str, kappa: float, times, replicas=None, slot: int = 0):
    """Snapshots (len(times), M, N, d) at physical times; RBM-r read at (N/p) t."""
    m = cfg.replicas if replicas is None else replicas
    parts = map_chunks(
        lambda ids: simulate_chunk(model, cfg, scheme, kappa, ids, times, slot), m, cfg.chunk, cfg.worker_count()
    )
    return np.concatenate(parts, axis=1)


def run_simulate(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    model = cfg.build_model()
    kappa = cfg.kappas[0]
    times = cfg.times()
    return {s: simulate_scheme(model, cfg, s, kappa, times) for s in cfg.schemes}


# --------------------------------------------------------------------------
# lemma experiments

def drift_noise_bound(model: ModelSpec, h: float, m0_sq: float, steps: np.ndarray) -> np.ndarray:
    """Upper bound on E|X|^2 after ``steps`` Euler steps of size h.

    For quadratic V and |interaction| <= sup|K|, Minkowski's inequality splits
    the scheme into the contracted initial state, the accumulated bounded
    drift and the accumulated Gaussian part.
    """
    r = 1.0 - model.lam * h
    if not 0 <= r < 1:
        raise ContractError("need 0 < lam * h <= 1 for the moment bound")
    steps = np.asarray(steps, dtype=float)
    geo = (1 - r ** steps) / (1 - r)
    geo2 = (1 - r ** (2 * steps)) / (1 - r * r)
    norm = r ** steps * math.sqrt(m0_sq) + model.kernel_bound * h * geo + model.sigma * np.sqrt(h * model.dim * geo2)
    return norm ** 2


@dataclass
class MomentCheck:
    scheme: str
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    bound: np.ndarray
    trend: float
    trend_se: float

    @property
    def bounded(self) -> bool:
        return bool(np.all(self.mean <= self.bound + 3 * self.se))

    @property
    def flat(self) -> bool:
        return abs(self.trend) <= 3 * self.trend_se

    @property
    def passed(self) -> bool:
        return self.bounded and self.flat


def moment_experiment(cfg: ExperimentConfig, schemes=("ips", "rbm1", "rbmr"), sigma=None) -> list[MomentCheck]:
    lc = cfg.lemmas
    sigma = lc.moment_sigma if sigma is None else sigma
    model = cfg.build_model().with_sigma(sigma)
    kappa, horizon = lc.moment_kappa, lc.moment_horizon
    sub = cfg.substeps
    h = kappa / sub
    steps = grid_index(horizon, kappa)
    times = [j * kappa for j in range(steps + 1)]
    local = ExperimentConfig(**{**cfg.__dict__, "horizon": horizon, "kappas": [kappa], "eval_times": times})
    m0_sq = cfg.init_scale ** 2 * cfg.d
    out = []
    for scheme in schemes:
        snaps = simulate_scheme(model, local, scheme, kappa, times, lc.moment_replicas)
        per_rep = np.mean(np.sum(snaps ** 2, axis=-1), axis=2)  # (T, M)
        mean = fsum_mean(per_rep.T)
        se = fsum_se(per_rep.T, mean)
        ks = np.arange(steps + 1)
        if scheme == "rbmr":
            # own-clock step count of a particle is Binomial((N/p) k, p/N)
            q = cfg.p / cfg.n
            bound = np.empty(len(ks))
            for j, k in enumerate(ks):
                kr = pseudo_index(int(k), cfg.n, cfg.p)
                c = np.arange(kr + 1)
                w = stats.binom.pmf(c, kr, q)
                bound[j] = float(np.sum(w * drift_noise_bound(model, h, m0_sq, sub * c)))
        else:
            bound = drift_noise_bound(model, h, m0_sq, sub * ks)
        half = len(times) // 2
        tr, tr_se = trend_slope(times[half:], per_rep[half:])
        out.append(MomentCheck(scheme, np.asarray(times), mean, se, bound, tr, tr_se))
    return out


@dataclass
class HolderCheck:
    scheme: str
    sigma: float
    linear: float
    linear_se: float
    quadratic: float
    quadratic_se: float

    @property
    def passed(self) -> bool:
        if self.sigma == 0:
            return abs(self.linear) <= 3 * self.linear_se
        return self.linear <= 3 * self.sigma ** 2 + 3 * self.linear_se


def holder_pairs(steps: int, base_every: int, max_lag: int) -> list[tuple[int, int]]:
    """Grid pairs (c - l, c + l) symmetric about midpoints c spaced ``base_every`` apart.

    Symmetric pairs cancel the odd third-order term of a smooth path, which
    otherwise leaks into the fitted linear coefficient.
    """
    return [(c - l, c + l) for c in range(max_lag, steps - max_lag + 1, base_every) for l in range(1, max_lag + 1)]


def holder_experiment(cfg: ExperimentConfig, sigma: float, scheme: str = "ips") -> HolderCheck:
    lc = cfg.lemmas
    model = cfg.build_model().with_sigma(sigma)
    kappa, horizon = lc.holder_kappa, lc.holder_horizon
    steps = grid_index(horizon, kappa)
    times = [j * kappa for j in range(steps + 1)]
    local = ExperimentConfig(
        **{**cfg.__dict__, "horizon": horizon, "kappas": [kappa], "eval_times": times, "substeps": 1}
    )
    snaps = simulate_scheme(model, local, scheme, kappa, times, lc.holder_replicas)
    pairs = holder_pairs(steps, grid_index(lc.holder_base_step, kappa), lc.holder_max_lag)
    fit = holder_regression(snaps, times, pairs)
    return HolderCheck(scheme, sigma, fit.linear, fit.linear_se, fit.quadratic, fit.quadratic_se)


@dataclass
class LemmaRow:
    lemma: str
    n: int
    p: int
    report: ClockLawReport


def clock_lemmas(cfg: ExperimentConfig, grid=None) -> list[LemmaRow]:
    lc = cfg.lemmas
    rows = []
    for n, p in grid if grid is not None else lc.grid:
        s = cfg.seed
        for r in validate_geometric_clock(n, p, lc.samples, s):
            rows.append(LemmaRow("geometric_gaps", n, p, r))
        for r in validate_binomial_counts(n, p, lc.count_interval, lc.samples, s):
            rows.append(LemmaRow("binomial_counts", n, p, r))
        for r in validate_lln_variance(n, p, lc.kappa, lc.t, lc.samples, s):
            rows.append(LemmaRow("lln_variance", n, p, r))
        for r in validate_clock_gap_integral(n, p, lc.kappa, lc.t, lc.gap_samples, s):
            rows.append(LemmaRow("clock_gap_integral", n, p, r))
    return rows


# --------------------------------------------------------------------------
# cost scaling

@dataclass
class CostScaling:
    ns: list
    ips_seconds: list
    rbmr_seconds: list
    ips_exponent: float
    rbmr_exponent: float


def cost_scaling(
    ns=(64, 128, 256), p: int = 2, kappa: float = 0.01, horizon: float = 0.2, replicas: int = 4,
    seed: int = 0, repeats: int = 9,
) -> CostScaling:
    """Wall-clock per unit physical time of the full system and of RBM-r.

    RBM-r covers physical time t with (N/p) t / kappa single-batch intervals.
    Randomness is drawn before the clock starts. Sizes are timed round-robin
    and the best round per size is kept, so slow phases of a shared machine
    hit every size alike. A small replica stack keeps the N^2 pair arrays
    cache-resident, so the timing reflects arithmetic rather than memory traffic.
    """
    from ..model import quadratic_saturating

    model = quadratic_saturating(1.0, 0.4, 0.5)
    ids = np.arange(replicas)
    jobs = []
    for n in ns:
        cfg = ExperimentConfig(n=n, p=p, horizon=horizon, kappas=[kappa], eval_times=[horizon], seed=seed,
                               substeps=1, replicas=replicas, chunk=replicas, sigma=0.5)
        x0 = initial_positions(cfg, ids)
        for scheme in ("ips", "rbmr"):
            config = StepConfig(kappa, horizon, 1, scheme)
            pb = n if scheme == "ips" else p
            inputs = draw_inputs(model, n, pb, config,
                                 [substream(seed, int(r), "batch") for r in ids],
                                 [substream(seed, int(r), "noise") for r in ids], ids)
            k = config.n_intervals(n, p)
            simulate(model, x0, config, inputs, [min(k, 10)])  # warm-up, untimed
            jobs.append((n, scheme, x0, config, inputs, k))
    best = {(n, scheme): math.inf for n, scheme, *_ in jobs}
    for _ in range(repeats):
        for n, scheme, x0, config, inputs, k in jobs:
            t0 = time.perf_counter()
            simulate(model, x0, config, inputs, [k])
            best[n, scheme] = min(best[n, scheme], time.perf_counter() - t0)
    ips_t = [best[n, "ips"] / horizon for n in ns]
    rbmr_t = [best[n, "rbmr"] / horizon for n in ns]
    ln = np.log(np.asarray(ns, dtype=float))
    e_ips = float(np.polyfit(ln, np.log(ips_t), 1)[0])
    e_rbmr = float(np.polyfit(ln, np.log(rbmr_t), 1)[0])
    return CostScaling(list(ns), ips_t, rbmr_t, e_ips, e_rbmr)

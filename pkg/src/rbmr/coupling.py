"""Selection clocks and the shared-noise coupling of RBM-r with the full system.

Particle ``i`` of RBM-r, on its ``n``-th selection (counting from 0), uses the
Gaussian increments that drive particle ``i`` of the full system on interval
``n``. The intermediate system of N time-changed copies is never stored: copy
``i`` at pseudo-grid point ``tau_n^i`` is the full system at grid point ``n``,
and :func:`time_change_check` replays it to confirm that identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import (
    BatchSchedule,
    ContractError,
    BlowUpError,
    ParticleEnsemble,
    advance_ips,
    advance_rbmr,
    batch_force,
    check_batching,
    grid_index,
    sample_batches,
    _check_model_for_simulation,
)
from .model import ModelSpec, pairwise_force
from .streams import substream


@dataclass(frozen=True)
class ClockState:
    """Selection times of each particle, built from a batch schedule.

    ``stopping_times[i][n]`` is the interval index of the (n+1)-th selection of
    particle i; ``selection_counts[i]`` the number of selections overall.
    """

    stopping_times: tuple
    n_intervals: int

    @property
    def selection_counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.stopping_times], dtype=np.int64)

    def count_through(self, i: int, k: int) -> int:
        """Selections of i in intervals 0..k (inclusive)."""
        return int(np.searchsorted(self.stopping_times[i], k, side="right"))

    def count_before(self, i: int, k: int) -> int:
        """Selections of i in intervals 0..k-1."""
        return int(np.searchsorted(self.stopping_times[i], k, side="left"))

    def last_index(self, i: int, k: int) -> int:
        """max{n : tau_n^i <= k}, or -1 when i has not been selected yet."""
        return self.count_through(i, k) - 1

    def last_time(self, i: int, k: int) -> int:
        """tau at the last selection of i up to interval k, with tau_{-1} = 0."""
        n = self.last_index(i, k)
        return int(self.stopping_times[i][n]) if n >= 0 else 0

    def gaps(self, i: int) -> np.ndarray:
        """Inter-selection gaps tau_n - tau_{n-1} for n >= 1."""
        return np.diff(self.stopping_times[i])


def build_clock(schedule: BatchSchedule) -> ClockState:
    if len(schedule) == 0:
        raise ContractError("cannot build a clock from an empty schedule")
    b = schedule.batches
    k_idx = np.repeat(np.arange(b.shape[0]), b.shape[1])
    members = b.ravel()
    order = np.argsort(members, kind="stable")
    members, k_idx = members[order], k_idx[order]
    bounds = np.searchsorted(members, np.arange(schedule.n + 1))
    times = tuple(k_idx[bounds[i]:bounds[i + 1]].copy() for i in range(schedule.n))
    return ClockState(times, len(schedule))


class NoiseStore:
    """Gaussian increments keyed by (particle, interval of the particle's own clock).

    Blocks of shape (N, substeps, d) are drawn lazily, block ``n`` holding the
    increments of interval ``n`` for every particle in particle-major order, so
    the values never depend on how far the store has been extended.
    """

    def __init__(self, rng: np.random.Generator, n: int, substeps: int, dim: int):
        self._rng = rng
        self.shape = (n, substeps, dim)
        self._blocks: list[np.ndarray] = []
        self.reads = np.zeros(n, dtype=np.int64)

    def __len__(self):
        return len(self._blocks)

    def block(self, n: int) -> np.ndarray:
        while len(self._blocks) <= n:
            self._blocks.append(self._rng.standard_normal(self.shape))
        return self._blocks[n]

    def increment(self, i: int, n: int) -> np.ndarray:
        self.reads[i] += 1
        return self.block(n)[i]

    def extend(self, count: int) -> np.ndarray:
        """All blocks 0..count-1 stacked, shape (count, N, S, d)."""
        if count == 0:
            return np.empty((0,) + self.shape)
        self.block(count - 1)
        return np.stack(self._blocks[:count])


@dataclass
class CoupledRun:
    model: ModelSpec
    kappa: float
    n: int
    p: int
    horizon: float
    substeps: int
    schedule: BatchSchedule
    clock: ClockState
    ips: np.ndarray  # (n_ips + 1, N, d) on the physical grid
    rbmr: np.ndarray  # (K + 1, N, d) on the pseudo-time grid
    noise: np.ndarray | None  # (n_blocks, N, S, d) shared increments
    rbmr_reads: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    replica_id: int = 0

    @property
    def ratio(self) -> float:
        return self.n / self.p


@dataclass(frozen=True)
class StrongErrorSample:
    times: np.ndarray
    sq_dev: np.ndarray  # (len(times), N)
    replica_id: int = 0


def coupled_core(model, x0, batches, noise, h, substeps, n_ips, rec_ips, rec_rbmr, replica_ids=None):
    """Run RBM-r and the full system on shared increments for stacked replicas.

    ``batches`` (M, K, p) sorted rows; ``noise`` (M, B, N, S, d) or None with
    B >= max(n_ips, max selection count). Returns snapshots (len(rec), M, N, d)
    on the physical grid for the full system and on the pseudo grid for RBM-r,
    plus the per-particle count of increment blocks read by RBM-r.
    """
    x0 = np.asarray(x0, dtype=float)
    m, n, _ = x0.shape
    k_total = batches.shape[1]
    rows = np.arange(m)[:, None]
    ids = np.arange(m) if replica_ids is None else np.asarray(replica_ids)

    def blow(x, t):
        bad = ~np.isfinite(x).reshape(m, -1).all(axis=1)
        if bad.any():
            raise BlowUpError(int(ids[np.flatnonzero(bad)[0]]), t)

    out_r = np.empty((len(rec_rbmr), m, n, x0.shape[2]))
    want_r = {}
    for pos, r in enumerate(rec_rbmr):
        want_r.setdefault(int(r), []).append(pos)
    counts = np.zeros((m, n), dtype=np.int64)
    x = x0.copy()
    for pos in want_r.get(0, []):
        out_r[pos] = x
    last_r = max(rec_rbmr, default=0)
    for k in range(min(k_total, max(last_r, 0))):
        b = batches[:, k]
        xi = None
        if noise is not None:
            xi = noise[rows, counts[rows, b], b]
        x = advance_rbmr(model, x, b, h, substeps, xi)
        counts[rows, b] += 1
        blow(x, (k + 1) * h * substeps)
        for pos in want_r.get(k + 1, []):
            out_r[pos] = x

    out_i = np.empty((len(rec_ips), m, n, x0.shape[2]))
    want_i = {}
    for pos, r in enumerate(rec_ips):
        want_i.setdefault(int(r), []).append(pos)
    x = x0.copy()
    for pos in want_i.get(0, []):
        out_i[pos] = x
    for k in range(n_ips):
        xi = None if noise is None else noise[:, k]
        x = advance_ips(model, x, h, substeps, xi)
        blow(x, (k + 1) * h * substeps)
        for pos in want_i.get(k + 1, []):
            out_i[pos] = x
    return out_i, out_r, counts


def run_coupled(
    model: ModelSpec,
    initial: ParticleEnsemble,
    kappa: float,
    horizon: float,
    substeps: int,
    seed: int,
    p: int,
    slot: int = 0,
    allow_test_models: bool = False,
) -> CoupledRun:
    """Simulate one replica of RBM-r for (N/p)(T/kappa) intervals with its coupled full system.

    The full system is extended past T/kappa when some particle is selected
    more than T/kappa times, so every selection has a partner interval.
    """
    _check_model_for_simulation(model, allow_test_models)
    n = initial.n
    check_batching(n, p)
    if model.dim != initial.dim:
        raise ContractError("model and ensemble dimensions differ")
    steps = grid_index(horizon, kappa)
    k_total = grid_index(steps * n / p, 1.0)
    rid = initial.replica_id
    schedule = BatchSchedule(sample_batches(n, p, k_total, substream(seed, rid, "batch", slot)), n, p)
    clock = build_clock(schedule)
    n_ips = max(steps, int(clock.selection_counts.max()))
    noise = None
    if model.sigma > 0:
        store = NoiseStore(substream(seed, rid, "noise", slot), n, substeps, model.dim)
        noise = store.extend(n_ips)
    ips, rbmr, counts = coupled_core(
        model,
        initial.positions[None],
        schedule.batches[None],
        None if noise is None else noise[None],
        kappa / substeps,
        substeps,
        n_ips,
        range(n_ips + 1),
        range(k_total + 1),
        [rid],
    )
    return CoupledRun(
        model, kappa, n, p, horizon, substeps, schedule, clock,
        ips[:, 0], rbmr[:, 0], noise, counts[0], rid,
    )


def strong_error(run: CoupledRun, eval_times: Sequence[float]) -> StrongErrorSample:
    """Squared deviation |X~^i((N/p) t) - X^i(t)|^2 per particle at each t."""
    times = np.asarray(eval_times, dtype=float)
    rows = []
    for t in times:
        k = grid_index(t, run.kappa)
        if k > grid_index(run.horizon, run.kappa):
            raise ContractError(f"eval time {t} beyond horizon {run.horizon}")
        kr = k * run.n // run.p
        if kr * run.p != k * run.n:
            raise ContractError(f"pseudo-time (N/p) t is off the grid for t={t}")
        diff = run.rbmr[kr] - run.ips[k]
        rows.append(np.sum(diff * diff, axis=1))
    return StrongErrorSample(times, np.array(rows).reshape(len(times), run.n), run.replica_id)


def time_change_check(run: CoupledRun, i: int, n: int) -> bool:
    """Replay copy ``i`` of the intermediate system up to pseudo-grid tau_n^i.

    The copy moves every particle only on intervals where ``i`` is selected,
    using the full-system increments indexed by i's own selection count. At
    tau_n^i it must equal the stored full system at grid n, bit for bit.
    """
    taus = run.clock.stopping_times[i]
    if not 0 <= n < len(taus):
        raise ContractError(f"selection index {n} outside the clock range of particle {i}")
    target = int(taus[n])
    h = run.kappa / run.substeps
    x = run.ips[0][None].copy()
    m = 0
    for k in range(target):
        if m < len(taus) and taus[m] == k:
            xi = None if run.noise is None else run.noise[m][None]
            x = advance_ips(run.model, x, h, run.substeps, xi)
            m += 1
    return m == n and bool(np.array_equal(x[0], run.ips[n]))


def batch_fluctuation(model: ModelSpec, positions: np.ndarray, batch, i: int) -> np.ndarray:
    """Batch force minus mean-field force on particle i."""
    return batch_force(model, positions, batch, i) - pairwise_force(model, positions, i)

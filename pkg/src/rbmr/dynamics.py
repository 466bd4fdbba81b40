"""Time steppers for the full particle system, RBM-1 and RBM-r.

The numerical core works on stacks of replicas: positions have shape
``(M, N, d)``. The single-ensemble functions (``step_ips`` and friends) wrap
the same kernels with ``M = 1``, so both entry points produce identical bits.

Within one interval of length ``kappa`` the batch SDE is integrated with
``substeps`` explicit Euler-Maruyama steps. Gaussian increments are laid out
particle-major, substep-minor: an advancing particle's block is ``(substeps, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ModelError, ModelSpec

SCHEMES = ("ips", "rbm1", "rbmr")
GRID_TOL = 1e-12


class BlowUpError(FloatingPointError):
    def __init__(self, replica, time):
        self.replica = replica
        self.time = time
        super().__init__(f"non-finite position in replica {replica} at time {time:g}")


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    time: float = 0.0
    replica_id: int = 0

    def __post_init__(self):
        x = np.array(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
            raise ContractError(f"positions must be (N, d) with N >= 2, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ContractError("positions must be finite")
        if self.time < 0:
            raise ContractError("time must be nonnegative")
        x.setflags(write=False)
        object.__setattr__(self, "positions", x)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class BatchSchedule:
    """Realised batches ``C_0, C_1, ...`` of one replica, rows sorted ascending."""

    batches: np.ndarray
    n: int
    p: int

    def __post_init__(self):
        b = np.asarray(self.batches, dtype=np.int64)
        if b.ndim != 2 or b.shape[1] != self.p:
            raise ContractError(f"batches must have shape (K, {self.p}), got {b.shape}")
        if b.size and (b.min() < 0 or b.max() >= self.n):
            raise ContractError("batch index out of range")
        s = np.sort(b, axis=1)
        if self.p > 1 and np.any(s[:, 1:] == s[:, :-1]):
            raise ContractError("batch indices must be distinct")
        object.__setattr__(self, "batches", s)

    def __len__(self):
        return self.batches.shape[0]


@dataclass(frozen=True)
class StepConfig:
    kappa: float
    horizon: float
    substeps: int = 1
    scheme: str = "ips"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not self.kappa > 0 or not self.horizon > 0:
            raise ContractError("kappa and horizon must be positive")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ContractError("substeps must be a positive integer")
        grid_index(self.horizon, self.kappa)

    @property
    def h(self) -> float:
        return self.kappa / self.substeps

    def n_intervals(self, n: int = 2, p: int = 2) -> int:
        """Intervals to reach ``horizon``; RBM-r runs N/p times as many."""
        steps = grid_index(self.horizon, self.kappa)
        if self.scheme == "rbmr":
            return grid_index(steps * n / p, 1.0)
        return steps


def grid_index(t: float, kappa: float) -> int:
    """Return ``t / kappa`` as an int, insisting that kappa divides t."""
    q = t / kappa
    k = int(round(q))
    if abs(q - k) > GRID_TOL * max(1.0, abs(q)) or k < 0:
        raise ContractError(f"time {t!r} is not a nonnegative multiple of kappa={kappa!r}")
    return k


def check_batching(n: int, p: int, scheme: str = "rbmr") -> None:
    if not 2 <= p <= n:
        raise ContractError(f"batch size must satisfy 2 <= p <= N, got p={p}, N={n}")
    if scheme == "rbm1" and n % p:
        raise ContractError(f"RBM-1 needs p to divide N, got p={p}, N={n}")


# --------------------------------------------------------------------------
# batch sampling

def _fisher_yates(n: int, p: int, u: np.ndarray) -> np.ndarray:
    """Partial Fisher-Yates driven by uniforms ``u`` of shape (K, p)."""
    k = u.shape[0]
    perm = np.tile(np.arange(n, dtype=np.int64), (k, 1))
    rows = np.arange(k)
    for j in range(p):
        pick = j + np.minimum((u[:, j] * (n - j)).astype(np.int64), n - j - 1)
        tmp = perm[rows, j].copy()
        perm[rows, j] = perm[rows, pick]
        perm[rows, pick] = tmp
    return perm[:, :p]


def sample_batches(n: int, p: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. uniform p-subsets of {0..N-1}, each row sorted.

    Consumes exactly ``count * p`` uniforms, so the result equals ``count``
    successive calls of :func:`sample_batch`.
    """
    check_batching(n, p)
    u = rng.random((count, p))
    return np.sort(_fisher_yates(n, p, u), axis=1)


def sample_batch(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    return sample_batches(n, p, 1, rng)[0]


def sample_partitions(n: int, p: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` uniform partitions into N/p blocks, shape (count, N/p, p)."""
    check_batching(n, p, "rbm1")
    u = rng.random((count, n))
    perm = _fisher_yates(n, n, u)
    return np.sort(perm.reshape(count, n // p, p), axis=2)


def sample_partition(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    return sample_partitions(n, p, 1, rng)[0]


# --------------------------------------------------------------------------
# forces

def group_forces(model: ModelSpec, y: np.ndarray) -> np.ndarray:
    """Within-group interaction for stacked groups ``y`` of shape (..., q, d).

    Member i of a group receives (1/(q-1)) sum_{j != i} K(y_j - y_i), summed in
    ascending j. The full system is the single group holding every particle.
    """
    q = y.shape[-2]
    # kv[..., j, i, :] = K(y_j - y_i). Reducing over j, which is not the
    # contiguous axis, adds whole slices one j at a time in index order.
    diff = y[..., :, None, :] - y[..., None, :, :]
    kv = np.asarray(model.kernel(diff), dtype=float)
    idx = np.arange(q)
    kv[..., idx, idx, :] = 0.0
    return np.add.reduce(kv, axis=-3) / (q - 1)


def batch_force(model: ModelSpec, positions: np.ndarray, batch: Sequence[int], i: int) -> np.ndarray:
    """(1/(p-1)) sum_{j in batch, j != i} K(x_j - x_i), ascending j."""
    x = np.asarray(positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    b = np.sort(np.asarray(batch, dtype=np.int64))
    if b.size < 2:
        raise ContractError("a batch needs at least two particles")
    if i not in set(b.tolist()):
        raise ContractError(f"particle {i} is not in batch {b.tolist()}")
    acc = np.zeros(x.shape[1])
    for j in b:
        if j != i:
            acc = acc + model.kernel(x[j] - x[i])
    return acc / (b.size - 1)


# --------------------------------------------------------------------------
# stacked steppers

def _advance_groups(model: ModelSpec, y: np.ndarray, h: float, substeps: int, noise) -> np.ndarray:
    """Euler-Maruyama over one interval for grouped states y (..., q, d).

    ``noise`` is None (sigma = 0) or standard normals of shape (..., q, substeps, d).
    """
    sigma = model.sigma
    scale = sigma * math.sqrt(h)
    for s in range(substeps):
        drift = -model.grad_potential(y) + group_forces(model, y)
        y = y + h * drift
        if sigma > 0:
            y = y + scale * noise[..., s, :]
    return y


def advance_ips(model: ModelSpec, x: np.ndarray, h: float, substeps: int, noise=None) -> np.ndarray:
    """One interval of the full system for stacked x (M, N, d); noise (M, N, S, d)."""
    return _advance_groups(model, x, h, substeps, noise)


def advance_rbmr(model, x, batches, h, substeps, noise=None) -> np.ndarray:
    """One RBM-r interval: rows of ``batches`` (M, p) move, everyone else is frozen.

    ``noise`` has shape (M, p, S, d), rows matching the sorted batch order.
    """
    rows = np.arange(x.shape[0])[:, None]
    y = _advance_groups(model, x[rows, batches], h, substeps, noise)
    out = x.copy()
    out[rows, batches] = y
    return out


def advance_rbm1(model, x, partitions, h, substeps, noise=None) -> np.ndarray:
    """One RBM-1 interval; ``partitions`` (M, N/p, p), noise (M, N, S, d) by particle."""
    rows = np.arange(x.shape[0])[:, None, None]
    g_noise = None if noise is None else noise[rows, partitions]
    y = _advance_groups(model, x[rows, partitions], h, substeps, g_noise)
    out = np.empty_like(x)
    out[rows, partitions] = y
    return out


# --------------------------------------------------------------------------
# single-ensemble API

def _noise_block(model: ModelSpec, noise, shape) -> np.ndarray | None:
    if model.sigma == 0:
        return None
    if isinstance(noise, np.random.Generator):
        return noise.standard_normal(shape)
    if noise is None:
        raise ContractError("sigma > 0 needs a noise generator or an increment array")
    arr = np.asarray(noise, dtype=float)
    if arr.shape != shape:
        raise ContractError(f"noise must have shape {shape}, got {arr.shape}")
    return arr


def _finish(x: np.ndarray, ens: ParticleEnsemble, kappa: float) -> ParticleEnsemble:
    t = ens.time + kappa
    if not np.isfinite(x).all():
        raise BlowUpError(ens.replica_id, t)
    return ParticleEnsemble(x, t, ens.replica_id)


def _require(config: StepConfig, scheme: str) -> None:
    if config.scheme != scheme:
        raise ContractError(f"config scheme is {config.scheme!r}, expected {scheme!r}")


def step_ips(model: ModelSpec, ensemble: ParticleEnsemble, config: StepConfig, noise=None) -> ParticleEnsemble:
    _require(config, "ips")
    s, d = config.substeps, ensemble.dim
    xi = _noise_block(model, noise, (ensemble.n, s, d))
    xi = None if xi is None else xi[None]
    x = advance_ips(model, ensemble.positions[None], config.h, s, xi)[0]
    return _finish(x, ensemble, config.kappa)


def step_rbmr(model, ensemble: ParticleEnsemble, config: StepConfig, batch, noise=None) -> ParticleEnsemble:
    _require(config, "rbmr")
    b = np.sort(np.asarray(batch, dtype=np.int64))
    check_batching(ensemble.n, b.size)
    BatchSchedule(b[None], ensemble.n, b.size)
    s, d = config.substeps, ensemble.dim
    xi = _noise_block(model, noise, (b.size, s, d))
    xi = None if xi is None else xi[None]
    x = advance_rbmr(model, ensemble.positions[None], b[None], config.h, s, xi)[0]
    return _finish(x, ensemble, config.kappa)


def step_rbm1(model, ensemble: ParticleEnsemble, config: StepConfig, partition, noise=None) -> ParticleEnsemble:
    _require(config, "rbm1")
    part = np.sort(np.asarray(partition, dtype=np.int64), axis=1)
    if part.ndim != 2 or part.shape[1] < 2:
        raise ContractError("partition must be a list of equal-size batches")
    if not np.array_equal(np.sort(part.ravel()), np.arange(ensemble.n)):
        raise ContractError("partition must cover every particle exactly once")
    s, d = config.substeps, ensemble.dim
    xi = _noise_block(model, noise, (ensemble.n, s, d))
    xi = None if xi is None else xi[None]
    x = advance_rbm1(model, ensemble.positions[None], part[None], config.h, s, xi)[0]
    return _finish(x, ensemble, config.kappa)


# --------------------------------------------------------------------------
# trajectories

@dataclass
class ReplicaInputs:
    """Pre-drawn randomness for a stack of replicas (one scheme, one kappa)."""

    batches: np.ndarray | None = None  # (M, K, p) or (M, K, N/p, p)
    noise: np.ndarray | None = None  # (M, K, q, S, d)
    replica_ids: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))


def draw_inputs(model, n, p, config: StepConfig, batch_rngs, noise_rngs, replica_ids=None) -> ReplicaInputs:
    """Draw each replica's batches and increments from its own generators.

    One bulk draw per replica and stream; the values equal what interval-by-
    interval consumption of the same generators would give.
    """
    k = config.n_intervals(n, p)
    m = len(batch_rngs)
    batches = None
    if config.scheme == "rbmr":
        batches = np.stack([sample_batches(n, p, k, g) for g in batch_rngs])
    elif config.scheme == "rbm1":
        batches = np.stack([sample_partitions(n, p, k, g) for g in batch_rngs])
    noise = None
    if model.sigma > 0:
        q = p if config.scheme == "rbmr" else n
        shape = (k, q, config.substeps, model.dim)
        noise = np.stack([g.standard_normal(shape) for g in noise_rngs])
    ids = np.arange(m) if replica_ids is None else np.asarray(replica_ids)
    return ReplicaInputs(batches, noise, ids)


def _check_model_for_simulation(model: ModelSpec, allow_test_models: bool) -> None:
    if model.test_only and not allow_test_models:
        raise ModelError(f"model {model.name!r} violates the standing assumptions and is test-only")


def simulate(
    model: ModelSpec,
    x0: np.ndarray,
    config: StepConfig,
    inputs: ReplicaInputs,
    record_index: Sequence[int],
    allow_test_models: bool = False,
) -> np.ndarray:
    """Advance stacked replicas and return snapshots at the given interval indices.

    Returns an array of shape (len(record_index), M, N, d). Record indices are
    counted in the scheme's own intervals (pseudo-time grid for RBM-r).
    """
    _check_model_for_simulation(model, allow_test_models)
    x = np.array(x0, dtype=float)
    m, n, _ = x.shape
    total = max(record_index, default=0)
    if min(record_index, default=0) < 0 or total > inputs_intervals(config, inputs, n):
        raise ContractError("record index outside the simulated horizon")
    wanted = {}
    for pos, r in enumerate(record_index):
        wanted.setdefault(int(r), []).append(pos)
    out = np.empty((len(record_index),) + x.shape)
    for pos in wanted.get(0, []):
        out[pos] = x
    h, s = config.h, config.substeps
    for k in range(total):
        xi = None if inputs.noise is None else inputs.noise[:, k]
        if config.scheme == "ips":
            x = advance_ips(model, x, h, s, xi)
        elif config.scheme == "rbmr":
            x = advance_rbmr(model, x, inputs.batches[:, k], h, s, xi)
        else:
            x = advance_rbm1(model, x, inputs.batches[:, k], h, s, xi)
        if not np.isfinite(x).all():
            bad = int(np.flatnonzero(~np.isfinite(x).reshape(m, -1).all(axis=1))[0])
            raise BlowUpError(int(inputs.replica_ids[bad]), (k + 1) * config.kappa)
        for pos in wanted.get(k + 1, []):
            out[pos] = x
    return out


def inputs_intervals(config: StepConfig, inputs: ReplicaInputs, n: int) -> int:
    if inputs.batches is not None:
        return inputs.batches.shape[1]
    if inputs.noise is not None:
        return inputs.noise.shape[1]
    return config.n_intervals(n, n)


def run_trajectory(
    model: ModelSpec,
    initial: ParticleEnsemble,
    config: StepConfig,
    batch_rng: np.random.Generator | None,
    noise_rng: np.random.Generator | None,
    record_times: Sequence[float],
    p: int | None = None,
    allow_test_models: bool = False,
) -> list[ParticleEnsemble]:
    """Run one replica and return snapshots at ``record_times``.

    Record times live on the scheme's own axis, so for RBM-r they are
    pseudo-times; the harness does the N/p alignment.
    """
    n = initial.n
    if config.scheme != "ips":
        if p is None:
            raise ContractError(f"scheme {config.scheme!r} needs a batch size p")
        check_batching(n, p, config.scheme)
    else:
        p = n
    if model.dim != initial.dim:
        raise ContractError(f"model dimension {model.dim} != ensemble dimension {initial.dim}")
    k_total = config.n_intervals(n, p)
    idx = [grid_index(t, config.kappa) for t in record_times]
    if any(i > k_total for i in idx):
        raise ContractError("record time beyond the horizon")
    inputs = draw_inputs(model, n, p, config, [batch_rng], [noise_rng], [initial.replica_id])
    snaps = simulate(model, initial.positions[None], config, inputs, idx, allow_test_models)
    return [
        ParticleEnsemble(snaps[j, 0], initial.time + i * config.kappa, initial.replica_id)
        for j, i in enumerate(idx)
    ]

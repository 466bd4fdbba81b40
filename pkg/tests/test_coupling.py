import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbmr.coupling import (
    NoiseStore,
    batch_fluctuation,
    build_clock,
    coupled_core,
    run_coupled,
    strong_error,
    time_change_check,
)
from rbmr.dynamics import BatchSchedule, ContractError, ParticleEnsemble, StepConfig, sample_batches, step_ips, step_rbmr
from rbmr.model import quadratic_free, quadratic_linear_test, quadratic_saturating
from rbmr.streams import substream


def ens(x, r=0):
    x = np.asarray(x, dtype=float)
    return ParticleEnsemble(x.reshape(len(x), -1), 0.0, r)


def random_ens(n, seed, d=1):
    return ens(np.random.default_rng(seed).normal(size=(n, d)), seed)


# ---------------------------------------------------------------- clocks

def test_clock_hand_trace():
    clock = build_clock(BatchSchedule(np.array([[0, 1], [0, 2], [1, 2]]), 3, 2))
    assert [t.tolist() for t in clock.stopping_times] == [[0, 1], [0, 2], [1, 2]]
    assert clock.selection_counts.tolist() == [2, 2, 2]


def test_clock_full_batches():
    clock = build_clock(BatchSchedule(np.tile(np.arange(4), (7, 1)), 4, 4))
    for t in clock.stopping_times:
        assert t.tolist() == list(range(7))


def test_clock_unselected_particle():
    clock = build_clock(BatchSchedule(np.array([[0, 1], [0, 1]]), 3, 2))
    assert clock.stopping_times[2].size == 0
    assert clock.selection_counts[2] == 0
    assert clock.last_time(2, 1) == 0


def test_clock_rejects_empty():
    with pytest.raises(ContractError):
        build_clock(BatchSchedule(np.empty((0, 2), dtype=np.int64), 3, 2))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 10), k=st.integers(1, 60), seed=st.integers(0, 10_000), data=st.data())
def test_clock_invariants(n, k, seed, data):
    p = data.draw(st.integers(2, n))
    b = sample_batches(n, p, k, np.random.default_rng(seed))
    clock = build_clock(BatchSchedule(b, n, p))
    for i in range(n):
        taus = clock.stopping_times[i]
        assert np.all(clock.gaps(i) >= 1)
        for s in range(k):
            c = int(np.sum(np.any(b[: s + 1] == i, axis=1)))
            assert clock.count_through(i, s) == c
            # n^i(s) = max{n : tau_n <= s}
            assert clock.last_index(i, s) == (max((m for m, t in enumerate(taus) if t <= s), default=-1))
    if p == n:
        assert all(t.tolist() == list(range(k)) for t in clock.stopping_times)


# ---------------------------------------------------------------- noise store

def test_noise_store_blocks_independent_of_extension():
    a = NoiseStore(substream(0, 0, "noise"), 4, 2, 1)
    b = NoiseStore(substream(0, 0, "noise"), 4, 2, 1)
    bulk = a.extend(5)
    lazy = np.stack([b.block(j) for j in range(5)])
    assert np.array_equal(bulk, lazy)
    assert np.array_equal(b.increment(2, 3), bulk[3, 2])
    assert b.reads[2] == 1
    assert np.array_equal(substream(0, 0, "noise").standard_normal((5, 4, 2, 1)), bulk)


# ---------------------------------------------------------------- coupled runs

def test_zero_sigma_has_no_noise():
    run = run_coupled(quadratic_saturating(), random_ens(4, 0), 0.1, 0.5, 1, seed=0, p=2)
    assert run.noise is None


@pytest.mark.parametrize("sigma", [0.0, 0.5])
def test_full_batch_is_identical(sigma):
    run = run_coupled(quadratic_saturating(sigma=sigma), random_ens(5, 1), 0.1, 1.0, 2, seed=3, p=5)
    assert np.array_equal(run.rbmr, run.ips[: run.rbmr.shape[0]])


def test_free_quadratic_scalar_oracle():
    lam, kappa, sub, horizon, n, p = 1.0, 0.1, 2, 1.0, 4, 2
    x0 = np.array([1.0, -0.5, 2.0, 0.25])
    run = run_coupled(quadratic_free(lam), ens(x0), kappa, horizon, sub, seed=7, p=p)
    factor = 1 - lam * kappa / sub
    steps = 10
    counts = run.clock.selection_counts
    assert np.allclose(run.rbmr[-1, :, 0], x0 * factor ** (sub * counts), rtol=1e-13, atol=0)
    assert np.allclose(run.ips[steps, :, 0], x0 * factor ** (sub * steps), rtol=1e-13, atol=0)
    dev = strong_error(run, [horizon]).sq_dev[0]
    expect = (x0 * factor ** (sub * counts) - x0 * factor ** (sub * steps)) ** 2
    assert np.allclose(dev, expect, rtol=1e-12, atol=1e-15)


def test_ips_extends_past_horizon():
    run = run_coupled(quadratic_saturating(sigma=0.5), random_ens(4, 2), 0.1, 1.0, 1, seed=1, p=2)
    assert run.ips.shape[0] - 1 == max(10, int(run.clock.selection_counts.max()))
    assert run.noise.shape[0] == run.ips.shape[0] - 1


def test_strong_error_edge_cases():
    run = run_coupled(quadratic_saturating(sigma=0.5), random_ens(6, 4), 0.1, 1.0, 1, seed=2, p=2)
    assert np.all(strong_error(run, [0.0]).sq_dev == 0)
    with pytest.raises(ContractError):
        strong_error(run, [0.15])
    with pytest.raises(ContractError):
        strong_error(run, [1.2])
    full = run_coupled(quadratic_saturating(sigma=0.5), random_ens(6, 4), 0.1, 1.0, 1, seed=2, p=6)
    assert np.all(strong_error(full, [0.1 * j for j in range(11)]).sq_dev == 0)


def test_strong_error_matches_replay():
    m = quadratic_saturating()
    x0 = ens([0.0, 1.0, 2.0])
    kappa, horizon = 0.1, 0.2
    run = run_coupled(m, x0, kappa, horizon, 1, seed=11, p=2)
    cfg_r = StepConfig(kappa, horizon, 1, "rbmr")
    cfg_i = StepConfig(kappa, horizon, 1, "ips")
    xr = x0
    for b in run.schedule.batches:
        xr = step_rbmr(m, xr, cfg_r, b)
    xi = step_ips(m, step_ips(m, x0, cfg_i), cfg_i)
    expect = np.sum((xr.positions - xi.positions) ** 2, axis=1)
    assert np.array_equal(strong_error(run, [horizon]).sq_dev[0], expect)


def test_shared_noise_ledger():
    m = quadratic_saturating(sigma=0.5, dim=2)
    run = run_coupled(m, random_ens(6, 5, d=2), 0.1, 0.5, 2, seed=9, p=3)
    assert np.array_equal(run.rbmr_reads, run.clock.selection_counts)
    # replay RBM-r feeding each member its own-clock IPS increment block
    cfg = StepConfig(0.1, 0.5, 2, "rbmr")
    x = ParticleEnsemble(run.rbmr[0], 0.0, 0)
    seen = np.zeros(6, dtype=int)
    for k, b in enumerate(run.schedule.batches):
        xi = np.stack([run.noise[seen[i], i] for i in b])
        x = step_rbmr(m, x, cfg, b, xi)
        seen[b] += 1
        assert np.array_equal(x.positions, run.rbmr[k + 1])


def test_time_change_examples():
    m = quadratic_saturating(sigma=0.5)
    run = run_coupled(m, random_ens(4, 0), 0.1, 1.0, 1, seed=0, p=2)
    assert len(run.schedule) == 20
    for i in range(4):
        for n in range(len(run.clock.stopping_times[i])):
            assert time_change_check(run, i, n)
    full = run_coupled(m, random_ens(4, 0), 0.1, 1.0, 1, seed=0, p=4)
    assert all(time_change_check(full, i, n) for i in range(4) for n in range(10))
    with pytest.raises(ContractError):
        time_change_check(run, 0, 10_000)


def test_time_change_catches_tampering():
    run = run_coupled(quadratic_saturating(sigma=0.5), random_ens(4, 0), 0.1, 1.0, 1, seed=0, p=2)
    n = len(run.clock.stopping_times[0]) - 1
    run.ips[n, 0, 0] += 1e-15
    assert not time_change_check(run, 0, n)


# ---------------------------------------------------------------- exchangeability

def _permuted_core(m, x0, batches, noise, perm, sub=1):
    inv = np.argsort(perm)
    y0 = x0[:, perm]
    yb = np.sort(inv[batches], axis=-1)
    yn = None if noise is None else noise[:, :, perm]
    return coupled_core(m, y0, yb, yn, 0.1 / sub, sub, 10, [10], [10 * x0.shape[1] // batches.shape[-1]])


def _core_inputs(n, p, seed, sigma=0.5):
    m = quadratic_saturating(sigma=sigma)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(1, n, 1))
    k = 10 * n // p
    batches = sample_batches(n, p, k, rng)[None]
    blocks = max(10, int(np.bincount(batches.ravel(), minlength=n).max()))
    noise = rng.normal(size=(1, blocks, n, 1, 1))
    return m, x0, batches, noise, k


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), perm=st.permutations(range(3)))
def test_label_equivariance_bit_exact(seed, perm):
    m, x0, b, xi, k = _core_inputs(3, 2, seed)
    perm = np.array(perm)
    ips, rbmr, _ = coupled_core(m, x0, b, xi, 0.1, 1, 10, [10], [k])
    pips, prbmr, _ = _permuted_core(m, x0, b, xi, perm)
    assert np.array_equal(pips[:, :, :], ips[:, :, perm])
    assert np.array_equal(prbmr[:, :, :], rbmr[:, :, perm])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), perm=st.permutations(range(6)))
def test_label_equivariance_larger(seed, perm):
    # beyond two summands float addition is not associative; equality to rounding
    m, x0, b, xi, k = _core_inputs(6, 3, seed)
    perm = np.array(perm)
    ips, rbmr, _ = coupled_core(m, x0, b, xi, 0.1, 1, 10, [10], [k])
    pips, prbmr, _ = _permuted_core(m, x0, b, xi, perm)
    assert np.allclose(pips, ips[:, :, perm], atol=1e-12, rtol=0)
    assert np.allclose(prbmr, rbmr[:, :, perm], atol=1e-12, rtol=0)


# ---------------------------------------------------------------- fluctuation

def test_batch_fluctuation_examples():
    lin = quadratic_linear_test()
    x = np.array([[0.0], [1.0], [2.0]])
    assert batch_fluctuation(lin, x, [0, 1], 0)[0] == -0.5
    sat = quadratic_saturating()
    assert np.all(batch_fluctuation(sat, x, [0, 1, 2], 1) == 0)


@pytest.mark.parametrize("n", range(2, 9))
def test_batch_fluctuation_mean_zero(n):
    m = quadratic_saturating(dim=2)
    x = np.random.default_rng(n).normal(size=(n, 2)) * 2
    for p in range(2, n + 1):
        for i in range(n):
            others = [j for j in range(n) if j != i]
            fl = [batch_fluctuation(m, x, sorted((i,) + c), i) for c in itertools.combinations(others, p - 1)]
            assert np.all(np.abs(np.mean(fl, axis=0)) <= 1e-12)

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rbmr.dynamics import (
    BatchSchedule,
    BlowUpError,
    ContractError,
    ParticleEnsemble,
    StepConfig,
    batch_force,
    draw_inputs,
    grid_index,
    run_trajectory,
    sample_batch,
    sample_batches,
    sample_partition,
    simulate,
    step_ips,
    step_rbm1,
    step_rbmr,
)
from rbmr.model import ModelError, ModelSpec, pairwise_force, quadratic_free, quadratic_linear_test, quadratic_saturating
from rbmr.streams import substream


def ens(x, t=0.0, r=0):
    x = np.asarray(x, dtype=float)
    return ParticleEnsemble(x.reshape(len(x), -1), t, r)


def euler_oracle(model, x, h, steps, noise=None):
    """Scalar-loop Euler-Maruyama for the full system; noise shape (steps, N, d)."""
    x = [np.array(v, dtype=float) for v in x]
    n = len(x)
    for s in range(steps):
        new = []
        for i in range(n):
            f = np.zeros_like(x[i])
            for j in range(n):
                if j != i:
                    f = f + model.kernel((x[j] - x[i])[None])[0]
            drift = -model.grad_potential(x[i][None])[0] + f / (n - 1)
            v = x[i] + h * drift
            if noise is not None:
                v = v + model.sigma * math.sqrt(h) * noise[s, i]
            new.append(v)
        x = new
    return np.array(x)


# ---------------------------------------------------------------- sampling

def test_sample_batch_uniform_pairs():
    rng = substream(1, 0, "batch")
    b = sample_batches(4, 2, 600_000, rng)
    pairs = list(itertools.combinations(range(4), 2))
    code = b[:, 0] * 4 + b[:, 1]
    counts = np.array([(code == i * 4 + j).sum() for i, j in pairs])
    q = 1 / 6
    se = math.sqrt(q * (1 - q) / b.shape[0])
    assert np.all(np.abs(counts / b.shape[0] - q) <= 3 * se)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_sample_batch_full_and_tiny():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_batch(5, 5, rng).tolist() == [0, 1, 2, 3, 4]
        assert sample_batch(2, 2, rng).tolist() == [0, 1]


def test_sample_batch_consumes_p_uniforms():
    a = substream(3, 0, "batch")
    b = substream(3, 0, "batch")
    sample_batch(10, 3, a)
    b.random(3)
    assert a.random() == b.random()


@pytest.mark.parametrize("n,p", [(3, 4), (4, 1), (4, 0)])
def test_sample_batch_rejects(n, p):
    with pytest.raises(ContractError):
        sample_batch(n, p, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 30), data=st.data())
def test_batches_are_sorted_distinct(n, data):
    p = data.draw(st.integers(2, n))
    b = sample_batches(n, p, 50, np.random.default_rng(data.draw(st.integers(0, 1000))))
    assert b.shape == (50, p)
    assert np.all(np.diff(b, axis=1) > 0)
    assert b.min() >= 0 and b.max() < n


def test_partition_covers():
    rng = np.random.default_rng(0)
    part = sample_partition(12, 3, rng)
    assert part.shape == (4, 3)
    assert sorted(part.ravel().tolist()) == list(range(12))


def test_schedule_validation():
    with pytest.raises(ContractError):
        BatchSchedule(np.array([[0, 0]]), 3, 2)
    with pytest.raises(ContractError):
        BatchSchedule(np.array([[0, 3]]), 3, 2)


# ---------------------------------------------------------------- forces

def test_batch_force_examples():
    m = quadratic_linear_test()
    x = np.array([[0.0], [1.0], [2.0]])
    f01 = batch_force(m, x, [0, 1], 0)[0]
    f02 = batch_force(m, x, [0, 2], 0)[0]
    assert f01 == 1.0 and f02 == 2.0
    assert (f01 + f02) / 2 == pairwise_force(m, x, 0)[0] == 1.5
    with pytest.raises(ContractError):
        batch_force(m, x, [1, 2], 0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 8), d=st.integers(1, 2), seed=st.integers(0, 10_000), data=st.data())
def test_conditional_unbiasedness_enumeration(n, d, seed, data):
    p = data.draw(st.integers(2, n))
    i = data.draw(st.integers(0, n - 1))
    x = np.random.default_rng(seed).normal(size=(n, d)) * 2
    m = quadratic_saturating(1.0, 0.4, dim=d)
    others = [j for j in range(n) if j != i]
    fs = [batch_force(m, x, sorted((i,) + c), i) for c in itertools.combinations(others, p - 1)]
    assert len(fs) == math.comb(n - 1, p - 1)
    assert np.all(np.abs(np.mean(fs, axis=0) - pairwise_force(m, x, i)) <= 1e-12)


# ---------------------------------------------------------------- steppers

def test_step_ips_scalar_euler():
    m = quadratic_free()
    e = ens([1.0, 1.0])
    assert step_ips(m, e, StepConfig(0.1, 1.0, 1, "ips")).positions[0, 0] == pytest.approx(0.9, abs=1e-15)
    x4 = step_ips(m, e, StepConfig(0.1, 1.0, 4, "ips")).positions[0, 0]
    assert x4 == pytest.approx(0.975 ** 4, abs=1e-15)
    assert x4 == pytest.approx(0.903688, abs=1e-6)


def test_step_ips_matches_loop_oracle_with_noise():
    m = quadratic_saturating(1.0, 0.4, sigma=0.5, dim=2)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 2))
    xi = rng.normal(size=(5, 3, 2))  # particle-major, substep-minor
    out = step_ips(m, ens(x), StepConfig(0.1, 1.0, 3, "ips"), xi).positions
    ref = euler_oracle(m, x, 0.1 / 3, 3, np.transpose(xi, (1, 0, 2)))
    assert np.allclose(out, ref, atol=1e-14, rtol=0)


def test_two_steps_equal_one_run():
    m = quadratic_saturating(1.0, 0.4, sigma=0.5)
    x0 = ens(np.random.default_rng(0).normal(size=(6, 1)))
    cfg = StepConfig(0.1, 0.2, 2, "ips")
    g = substream(0, 0, "noise")
    two = step_ips(m, step_ips(m, x0, cfg, g), cfg, g)
    run = run_trajectory(m, x0, cfg, None, substream(0, 0, "noise"), [0.2])[0]
    assert np.array_equal(two.positions, run.positions)


def test_step_ips_noise_budget_and_no_draws_at_zero_sigma():
    cfg = StepConfig(0.1, 1.0, 3, "ips")
    x = ens(np.zeros((4, 2)))
    a, b = substream(0, 0, "noise"), substream(0, 0, "noise")
    step_ips(quadratic_saturating(1.0, 0.4, 0.5, dim=2), x, cfg, a)
    b.standard_normal(4 * 3 * 2)
    assert a.standard_normal() == b.standard_normal()
    c, d = substream(0, 0, "noise"), substream(0, 0, "noise")
    step_ips(quadratic_saturating(1.0, 0.4, 0.0, dim=2), x, cfg, c)
    assert c.standard_normal() == d.standard_normal()


def test_step_rbmr_full_batch_is_ips():
    m = quadratic_saturating(1.0, 0.4, sigma=0.5)
    x = ens(np.random.default_rng(1).normal(size=(5, 1)))
    ips = step_ips(m, x, StepConfig(0.1, 1.0, 2, "ips"), substream(0, 0, "noise"))
    rbmr = step_rbmr(m, x, StepConfig(0.1, 1.0, 2, "rbmr"), range(5), substream(0, 0, "noise"))
    assert np.array_equal(ips.positions, rbmr.positions)


def test_step_rbmr_frozen_and_oracle():
    m = quadratic_saturating(1.0, 0.4)
    x = ens([0.0, 1.0, 2.0])
    out = step_rbmr(m, x, StepConfig(0.1, 1.0, 1, "rbmr"), [0, 1]).positions
    assert out[2, 0] == 2.0
    k = 0.4 / math.sqrt(2)
    assert out[0, 0] == pytest.approx(0.0 + 0.1 * (0.0 + k), abs=1e-15)
    assert out[1, 0] == pytest.approx(1.0 + 0.1 * (-1.0 - k), abs=1e-15)


def test_step_rbmr_noise_budget():
    m = quadratic_saturating(1.0, 0.4, sigma=0.5, dim=2)
    x = ens(np.zeros((6, 2)))
    a, b = substream(2, 0, "noise"), substream(2, 0, "noise")
    out = step_rbmr(m, x, StepConfig(0.1, 1.0, 3, "rbmr"), [1, 4], a)
    b.standard_normal(2 * 3 * 2)
    assert a.standard_normal() == b.standard_normal()
    frozen = [0, 2, 3, 5]
    assert np.array_equal(out.positions[frozen], x.positions[frozen])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 10), seed=st.integers(0, 10_000), data=st.data())
def test_frozen_particles_bit_identical(n, seed, data):
    p = data.draw(st.integers(2, n))
    rng = np.random.default_rng(seed)
    x = ens(rng.normal(size=(n, 2)) * 3)
    batch = sample_batch(n, p, rng)
    out = step_rbmr(quadratic_saturating(1.0, 0.4, 0.5, dim=2), x, StepConfig(0.05, 1.0, 2, "rbmr"), batch, rng)
    rest = np.setdiff1d(np.arange(n), batch)
    assert np.array_equal(out.positions[rest], x.positions[rest])


def test_step_rbm1_degenerate_cases():
    rng = np.random.default_rng(2)
    x = ens(rng.normal(size=(6, 1)))
    m = quadratic_saturating(1.0, 0.4, sigma=0.5)
    xi = rng.normal(size=(6, 2, 1))
    ips = step_ips(m, x, StepConfig(0.1, 1.0, 2, "ips"), xi)
    full = step_rbm1(m, x, StepConfig(0.1, 1.0, 2, "rbm1"), [list(range(6))], xi)
    assert np.array_equal(ips.positions, full.positions)
    free = quadratic_free(sigma=0.5)
    a = step_ips(free, x, StepConfig(0.1, 1.0, 2, "ips"), xi)
    b = step_rbm1(free, x, StepConfig(0.1, 1.0, 2, "rbm1"), [[0, 3], [1, 5], [2, 4]], xi)
    assert np.array_equal(a.positions, b.positions)


def test_step_rbm1_two_subsystem_oracle():
    m = quadratic_saturating(1.0, 0.4)
    x = np.array([[0.3], [-1.0], [2.0], [0.5]])
    out = step_rbm1(m, ens(x), StepConfig(0.1, 1.0, 1, "rbm1"), [[0, 1], [2, 3]]).positions
    ref = np.concatenate([euler_oracle(m, x[:2], 0.1, 1), euler_oracle(m, x[2:], 0.1, 1)])
    assert np.array_equal(out, ref)


def test_step_rbm1_rejects_bad_partition():
    with pytest.raises(ContractError):
        step_rbm1(quadratic_free(), ens(np.zeros(4)), StepConfig(0.1, 1.0, 1, "rbm1"), [[0, 1], [1, 2]])


def test_scheme_mismatch():
    with pytest.raises(ContractError):
        step_ips(quadratic_free(), ens(np.zeros(2)), StepConfig(0.1, 1.0, 1, "rbmr"))


def test_blowup_reports_replica_and_time():
    m = ModelSpec(1, lambda x: -np.inf * x, lambda x: 0 * x, 0.0, 0.0, 0.0, name="explode")
    with pytest.raises(BlowUpError) as err:
        step_ips(m, ens([1.0, 2.0], t=0.3, r=7), StepConfig(0.1, 1.0, 1, "ips"))
    assert err.value.replica == 7
    assert err.value.time == pytest.approx(0.4)


# ---------------------------------------------------------------- config and trajectories

def test_step_config_grid():
    assert StepConfig(0.1, 1.0, 1, "rbmr").n_intervals(16, 2) == 80
    assert StepConfig(0.1, 1.0, 1, "ips").n_intervals(16, 2) == 10
    with pytest.raises(ContractError):
        StepConfig(0.3, 1.0, 1, "ips")
    assert grid_index(0.3, 0.1) == 3
    with pytest.raises(ContractError):
        grid_index(0.35, 0.1)


def test_record_zero_returns_initial():
    x = ens(np.random.default_rng(0).normal(size=(4, 1)))
    snaps = run_trajectory(quadratic_saturating(), x, StepConfig(0.1, 1.0, 1, "rbmr"),
                           substream(0, 0, "batch"), None, [0.0], p=2)
    assert np.array_equal(snaps[0].positions, x.positions)


@pytest.mark.parametrize("scheme", ["ips", "rbm1", "rbmr"])
def test_free_quadratic_recursion(scheme):
    lam, kappa, sub, horizon, n, p = 1.5, 0.1, 2, 0.5, 6, 2
    m = quadratic_free(lam)
    x0 = np.linspace(-1, 2, n)[:, None]
    cfg = StepConfig(kappa, horizon, sub, scheme)
    k_total = cfg.n_intervals(n, p)
    snap = run_trajectory(m, ens(x0), cfg, substream(5, 0, "batch"), None, [k_total * kappa], p=p)[0]
    factor = 1 - lam * kappa / sub
    if scheme == "rbmr":
        counts = np.bincount(sample_batches(n, p, k_total, substream(5, 0, "batch")).ravel(), minlength=n)
    else:
        counts = np.full(n, grid_index(horizon, kappa))
    expect = x0[:, 0] * factor ** (sub * counts)
    assert np.allclose(snap.positions[:, 0], expect, rtol=1e-13, atol=0)


@pytest.mark.parametrize("scheme", ["ips", "rbm1", "rbmr"])
def test_trajectory_deterministic(scheme):
    m = quadratic_saturating(sigma=0.5)
    x0 = ens(np.random.default_rng(0).normal(size=(4, 1)))
    cfg = StepConfig(0.1, 0.5, 2, scheme)

    def go():
        return run_trajectory(m, x0, cfg, substream(9, 0, "batch"), substream(9, 0, "noise"), [0.2, 0.4], p=2)

    a, b = go(), go()
    assert all(np.array_equal(u.positions, v.positions) for u, v in zip(a, b))


def test_simulate_rejects_test_models():
    cfg = StepConfig(0.1, 0.2, 1, "ips")
    m = quadratic_linear_test()
    inputs = draw_inputs(m, 3, 3, cfg, [None], [None])
    with pytest.raises(ModelError):
        simulate(m, np.zeros((1, 3, 1)), cfg, inputs, [1])
    simulate(m, np.zeros((1, 3, 1)), cfg, inputs, [1], allow_test_models=True)


def test_bulk_inputs_equal_sequential_draws():
    m = quadratic_saturating(sigma=0.5)
    cfg = StepConfig(0.1, 0.3, 2, "rbmr")
    inp = draw_inputs(m, 6, 2, cfg, [substream(1, 4, "batch")], [substream(1, 4, "noise")], [4])
    bg, ng = substream(1, 4, "batch"), substream(1, 4, "noise")
    for k in range(cfg.n_intervals(6, 2)):
        assert np.array_equal(inp.batches[0, k], sample_batch(6, 2, bg))
        assert np.array_equal(inp.noise[0, k], ng.standard_normal((2, 2, 1)))


def test_stacked_simulation_matches_single_replica():
    m = quadratic_saturating(sigma=0.5)
    cfg = StepConfig(0.1, 0.3, 2, "rbm1")
    ids = [0, 1, 2]
    x0 = np.random.default_rng(0).normal(size=(3, 4, 1))
    inp = draw_inputs(m, 4, 2, cfg, [substream(0, r, "batch") for r in ids], [substream(0, r, "noise") for r in ids], ids)
    stacked = simulate(m, x0, cfg, inp, [3])
    for r in ids:
        one = run_trajectory(m, ens(x0[r], r=r), cfg, substream(0, r, "batch"), substream(0, r, "noise"), [0.3], p=2)
        assert np.array_equal(one[0].positions, stacked[0, r])


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 64), d=st.integers(1, 3), m=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_group_forces_bit_exact_against_ascending_loop(n, d, m, seed):
    from rbmr.dynamics import group_forces

    x = np.random.default_rng(seed).normal(size=(m, n, d)) * 3
    model = quadratic_saturating(1.0, 0.4, dim=d)
    got = group_forces(model, x)
    for r in range(m):
        for i in range(n):
            assert np.array_equal(got[r, i], pairwise_force(model, x[r], i))

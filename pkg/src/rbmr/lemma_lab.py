"""Monte-Carlo checks of the selection-clock laws.

Only batch schedules are sampled here; no particle dynamics are involved.
Clock indices are 0-based: tau_n is the interval index of the (n+1)-th
selection, and the count through interval k is Binomial(k + 1, p/N).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dynamics import ContractError, check_batching, grid_index, sample_batches
from .streams import substream

CHUNK = 20_000


@dataclass(frozen=True)
class ClockLawReport:
    statistic: str
    empirical: float
    analytic: float
    se: float
    passed: bool
    one_sided: bool = False

    @property
    def z(self) -> float:
        if self.se == 0:
            return 0.0 if self.empirical == self.analytic else math.inf
        return (self.empirical - self.analytic) / self.se

    def row(self) -> dict:
        return {
            "statistic": self.statistic,
            "empirical": self.empirical,
            "analytic": self.analytic,
            "se": self.se,
            "pass": self.passed,
        }


def _two_sided(name, emp, ana, se, k=3.0):
    if se == 0:
        ok = emp == ana
    else:
        ok = abs(emp - ana) <= k * se
    return ClockLawReport(name, float(emp), float(ana), float(se), bool(ok))


def _mean_report(name, x, ana):
    x = np.asarray(x, dtype=float)
    se = x.std(ddof=1) / math.sqrt(x.size) if x.size > 1 else 0.0
    return _two_sided(name, x.mean(), ana, se)


def _var_report(name, x, ana):
    x = np.asarray(x, dtype=float)
    n = x.size
    c = x - x.mean()
    var = float(np.sum(c * c) / (n - 1))
    m4 = float(np.mean(c ** 4))
    se = math.sqrt(max(m4 - var * var, 0.0) / n)
    return _two_sided(name, var, ana, se)


def _membership(n, p, intervals, rng, particles=(0,)):
    """Boolean (intervals, len(particles)) membership of particles in i.i.d. batches."""
    out = []
    done = 0
    while done < intervals:
        c = min(CHUNK * 8 // max(p, 1), intervals - done)
        b = sample_batches(n, p, c, rng)
        out.append(np.stack([(b == i).any(axis=1) for i in particles], axis=1))
        done += c
    return np.concatenate(out)


def validate_geometric_clock(n: int, p: int, samples: int = 100_000, seed: int = 0) -> list[ClockLawReport]:
    """Inter-selection gaps of particle 0 against the geometric law with success p/N."""
    check_batching(n, p)
    rng = substream(seed, 0, "misc")
    q = p / n
    gaps = []
    have = 0
    while have < samples:
        need = samples - have + 1
        sel = np.flatnonzero(_membership(n, p, int(need / q * 1.2) + 50, rng)[:, 0])
        g = np.diff(sel)
        gaps.append(g)
        have += g.size
    g = np.concatenate(gaps)[:samples]
    mean_ana = n / p
    var_ana = (n / p) ** 2 - n / p
    reports = [
        _mean_report("gap_mean", g, mean_ana),
        _var_report("gap_variance", g, var_ana),
    ]
    if p == n:
        return reports
    # chi-square over bins with expected count >= 5, remaining tail pooled
    kmax = 1
    while samples * (1 - q) ** kmax * q >= 5:
        kmax += 1
    support = np.arange(1, kmax + 1)
    expected = samples * (1 - q) ** (support - 1) * q
    observed = np.array([(g == j).sum() for j in support], dtype=float)
    tail_exp = samples - expected.sum()
    tail_obs = samples - observed.sum()
    obs = np.append(observed, tail_obs)
    exp = np.append(expected, tail_exp)
    chi = stats.chisquare(obs, exp)
    reports.append(ClockLawReport("gap_chi2_pvalue", float(chi.pvalue), 0.001, 0.0, bool(chi.pvalue > 0.001), True))
    return reports


def _tau_at(n, p, target, samples, rng):
    """0-based interval index of the (target+1)-th selection of particle 0, per sample."""
    q = p / n
    horizon = int((target + 1) / q + 8 * math.sqrt((target + 1) * (1 - q)) / q) + 20
    out = np.empty(samples, dtype=np.int64)
    done = 0
    while done < samples:
        c = min(max(CHUNK * 20 // horizon, 1), samples - done)
        sel = _membership(n, p, c * horizon, rng)[:, 0].reshape(c, horizon)
        cs = np.cumsum(sel, axis=1)
        ok = cs[:, -1] > target
        if not ok.all():
            horizon *= 2
            continue
        out[done:done + c] = np.argmax(cs > target, axis=1)
        done += c
    return out


def lln_exact(n, p, kappa, t) -> float:
    """(N^2/p^2 - N/p) kappa^2 (t/kappa + 1)."""
    return ((n / p) ** 2 - n / p) * kappa ** 2 * (t / kappa + 1)


def lln_offset_exact(n, p, kappa, t) -> float:
    """Exact E|kappa tau_{n_t} - (N/p) t|^2 for 0-based tau, including the centring offset.

    tau_{n_t} has mean (n_t + 1) N/p - 1, so the mean-square adds
    kappa^2 (N/p - 1)^2 to the variance term.
    """
    return lln_exact(n, p, kappa, t) + (kappa * (n / p - 1)) ** 2


def validate_lln_variance(n, p, kappa, t, samples=100_000, seed=0) -> list[ClockLawReport]:
    """E|kappa tau_{n_t} - (N/p) t|^2 against the closed form.

    Two rows: the closed form with the variance term only, and the exact value
    for 0-based clock indices which adds the squared mean offset.
    """
    check_batching(n, p)
    nt = grid_index(t, kappa)
    rng = substream(seed, 0, "misc", 1)
    tau = _tau_at(n, p, nt, samples, rng)
    dev = (kappa * tau - (n / p) * t) ** 2
    return [
        _mean_report("lln_msd", dev, lln_exact(n, p, kappa, t)),
        _mean_report("lln_msd_offset_exact", dev, lln_offset_exact(n, p, kappa, t)),
    ]


def validate_binomial_counts(n, p, k, samples=100_000, seed=0) -> list[ClockLawReport]:
    """Selections of particle 0 in intervals 0..k against Binomial(k+1, p/N)."""
    check_batching(n, p)
    if k < 0:
        raise ContractError("interval index must be >= 0")
    rng = substream(seed, 0, "misc", 2)
    counts = np.empty(samples, dtype=np.int64)
    done = 0
    per = k + 1
    while done < samples:
        c = min(max(CHUNK * 20 // per, 1), samples - done)
        sel = _membership(n, p, c * per, rng)[:, 0].reshape(c, per)
        counts[done:done + c] = sel.sum(axis=1)
        done += c
    q = p / n
    return [
        _mean_report("count_mean", counts, per * q),
        _var_report("count_variance", counts, per * q * (1 - q)),
    ]


def clock_gap_bound(n, p, kappa, t) -> float:
    """6 (N/p)^3 t (1 + 2 t / kappa)."""
    return 6 * (n / p) ** 3 * t * (1 + 2 * t / kappa)


def validate_clock_gap_integral(n, p, kappa, t, samples=10_000, seed=0, i=0, j=1) -> list[ClockLawReport]:
    """Integral over pseudo-time [0, (N/p) t] of E|tau_{n^i(s)} - tau_{n^j(s)}|^2.

    tau_{n^i(s)} is the index of the last selection of i at or before s/kappa
    (0 before the first selection), a step function on the pseudo grid, so the
    integral is the exact left Riemann sum. One-sided check against the bound.
    """
    check_batching(n, p)
    nt = grid_index(t, kappa)
    k_total = grid_index(nt * n / p, 1.0)
    bound = clock_gap_bound(n, p, kappa, t)
    if i == j or p == n:
        return [ClockLawReport("gap_integral", 0.0, bound, 0.0, True, True)]
    rng = substream(seed, 0, "misc", 3)
    vals = np.empty(samples)
    done = 0
    while done < samples:
        c = min(max(CHUNK * 20 // k_total, 1), samples - done)
        mem = _membership(n, p, c * k_total, rng, (i, j)).reshape(c, k_total, 2)
        ks = np.arange(k_total)
        last = np.where(mem, ks[None, :, None], -1)
        last = np.maximum.accumulate(last, axis=1)
        last = np.maximum(last, 0)
        diff = (last[:, :, 0] - last[:, :, 1]).astype(float)
        vals[done:done + c] = kappa * np.sum(diff * diff, axis=1)
        done += c
    emp = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(samples))
    return [ClockLawReport("gap_integral", emp, bound, se, bool(emp <= bound), True)]

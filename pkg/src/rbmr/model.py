"""Confining potentials, interaction kernels and their constant audits.

Kernels and potential gradients are vectorised maps ``(..., d) -> (..., d)``.
Particle indices are 0-based throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

VectorField = Callable[[np.ndarray], np.ndarray]


class ModelError(ValueError):
    """Raised for invalid model parameters or non-finite model output."""


@dataclass(frozen=True)
class ModelSpec:
    """Potential gradient, interaction kernel and the constants that go with them.

    ``lam`` is the strong-convexity constant of V, ``lipschitz_K`` the Lipschitz
    constant of K and ``kernel_bound`` its sup norm. ``test_only`` marks models
    that break the standing assumptions on purpose (unbounded kernel, flat
    potential); simulation entry points refuse them unless told otherwise.
    """

    dim: int
    grad_potential: VectorField
    kernel: VectorField
    lam: float
    lipschitz_K: float
    kernel_bound: float
    sigma: float = 0.0
    name: str = "custom"
    test_only: bool = False
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ModelError(f"dim must be a positive integer, got {self.dim!r}")
        if self.sigma < 0:
            raise ModelError(f"sigma must be >= 0, got {self.sigma}")
        if self.lam < 0 or self.lipschitz_K < 0 or self.kernel_bound < 0:
            raise ModelError("lam, lipschitz_K and kernel_bound must be nonnegative")

    @property
    def contractive(self) -> bool:
        """True when the declared constants satisfy lam > 0 and lam > 2 L."""
        return self.lam > 0 and self.lam > 2.0 * self.lipschitz_K

    def with_sigma(self, sigma: float) -> "ModelSpec":
        return ModelSpec(
            dim=self.dim,
            grad_potential=self.grad_potential,
            kernel=self.kernel,
            lam=self.lam,
            lipschitz_K=self.lipschitz_K,
            kernel_bound=self.kernel_bound,
            sigma=float(sigma),
            name=self.name,
            test_only=self.test_only,
            params={**self.params, "sigma": float(sigma)},
        )


def _zero_field(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


def quadratic_saturating(
    lam: float = 1.0, a: float = 0.4, sigma: float = 0.0, dim: int = 1, strict: bool = True
) -> ModelSpec:
    """V(x) = lam |x|^2 / 2 and K(x) = a x / sqrt(1 + |x|^2).

    Both the sup norm and the Lipschitz constant of K equal ``a``. With
    ``strict`` (the default) the contraction condition lam > 2a is enforced.
    """
    lam = float(lam)
    a = float(a)
    if lam <= 0:
        raise ModelError(f"lam must be positive, got {lam}")
    if a < 0:
        raise ModelError(f"kernel amplitude must be nonnegative, got {a}")
    if strict and not lam > 2.0 * a:
        raise ModelError(f"quadratic-saturating requires lam > 2a, got lam={lam}, a={a}")

    def grad_v(x: np.ndarray) -> np.ndarray:
        return lam * x

    def kernel(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        # in-place steps on one scratch array; same arithmetic as a x / sqrt(1 + |x|^2)
        r = x * x if x.shape[-1] == 1 else np.sum(x * x, axis=-1, keepdims=True)
        r += 1.0
        np.sqrt(r, out=r)
        out = a * x
        out /= r
        return out

    return ModelSpec(
        dim=dim,
        grad_potential=grad_v,
        kernel=kernel,
        lam=lam,
        lipschitz_K=a,
        kernel_bound=a,
        sigma=float(sigma),
        name="quadratic-saturating",
        params={"lam": lam, "a": a, "sigma": float(sigma)},
    )


def quadratic_linear_test(lam: float = 1.0, sigma: float = 0.0, dim: int = 1) -> ModelSpec:
    """V(x) = lam |x|^2 / 2 with the unbounded kernel K(x) = x.

    Only for hand-checkable force arithmetic; never a simulation model.
    """
    lam = float(lam)

    def grad_v(x: np.ndarray) -> np.ndarray:
        return lam * x

    def kernel(x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=float, copy=True)

    return ModelSpec(
        dim=dim,
        grad_potential=grad_v,
        kernel=kernel,
        lam=lam,
        lipschitz_K=1.0,
        kernel_bound=float("inf"),
        sigma=float(sigma),
        name="quadratic-linear-test",
        test_only=True,
        params={"lam": lam, "sigma": float(sigma)},
    )


def quadratic_free(lam: float = 1.0, sigma: float = 0.0, dim: int = 1) -> ModelSpec:
    """Quadratic confinement with no interaction (K = 0)."""
    lam = float(lam)

    def grad_v(x: np.ndarray) -> np.ndarray:
        return lam * x

    return ModelSpec(
        dim=dim,
        grad_potential=grad_v,
        kernel=_zero_field,
        lam=lam,
        lipschitz_K=0.0,
        kernel_bound=0.0,
        sigma=float(sigma),
        name="quadratic-free",
        params={"lam": lam, "sigma": float(sigma)},
    )


def brownian_test(sigma: float = 0.5, dim: int = 1) -> ModelSpec:
    """Flat potential and zero kernel: pure scaled Brownian motion. Test only."""
    return ModelSpec(
        dim=dim,
        grad_potential=_zero_field,
        kernel=_zero_field,
        lam=0.0,
        lipschitz_K=0.0,
        kernel_bound=0.0,
        sigma=float(sigma),
        name="brownian-test",
        test_only=True,
        params={"sigma": float(sigma)},
    )


BUILTIN_MODELS = {
    "quadratic-saturating": quadratic_saturating,
    "quadratic-linear-test": quadratic_linear_test,
    "quadratic-free": quadratic_free,
    "brownian-test": brownian_test,
}


def build_model(name: str, **params) -> ModelSpec:
    """Look up a builtin model by name; ``params`` go to its constructor."""
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    return factory(**params)


@dataclass(frozen=True)
class AuditReport:
    lam_hat: float
    lipschitz_hat: float
    kernel_bound_hat: float
    sample_count: int
    radius: float
    passed: bool

    @property
    def contraction_margin(self) -> float:
        return self.lam_hat - 2.0 * self.lipschitz_hat


def _checked(fn: VectorField, x: np.ndarray, what: str) -> np.ndarray:
    out = np.asarray(fn(x), dtype=float)
    if out.shape != x.shape:
        raise ModelError(f"{what} returned shape {out.shape} for input of shape {x.shape}")
    bad = ~np.isfinite(out).all(axis=-1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise ModelError(f"{what} is not finite at x={x[k].tolist()}")
    return out


def audit_assumptions(
    model: ModelSpec, sample_count: int = 10_000, radius: float = 5.0, seed: int = 0, rtol: float = 1e-9
) -> AuditReport:
    """Estimate lam, L and sup|K| from random point pairs in a ball.

    Half of the pairs are independent points, the other half are local
    perturbations at log-uniform scales so that the Lipschitz quotient is
    probed near its supremum as well.
    """
    if sample_count < 2:
        raise ModelError("sample_count must be >= 2")
    if not radius > 0:
        raise ModelError("radius must be positive")
    rng = np.random.default_rng(seed)
    d = model.dim

    def in_ball(n):
        g = rng.standard_normal((n, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return g * radius * rng.random((n, 1)) ** (1.0 / d)

    x = in_ball(sample_count)
    y = in_ball(sample_count)
    half = sample_count // 2
    scales = radius * 10.0 ** (-4.0 * rng.random((half, 1)))
    step = rng.standard_normal((half, d))
    step /= np.linalg.norm(step, axis=1, keepdims=True)
    y[:half] = x[:half] + scales * step

    gx = _checked(model.grad_potential, x, "grad_potential")
    gy = _checked(model.grad_potential, y, "grad_potential")
    kx = _checked(model.kernel, x, "kernel")
    ky = _checked(model.kernel, y, "kernel")

    diff = x - y
    dist2 = np.sum(diff * diff, axis=1)
    ok = dist2 > 0
    lam_hat = float(np.min(np.sum(diff * (gx - gy), axis=1)[ok] / dist2[ok]))
    lip_hat = float(np.max(np.linalg.norm(kx - ky, axis=1)[ok] / np.sqrt(dist2[ok])))
    bound_hat = float(max(np.linalg.norm(kx, axis=1).max(), np.linalg.norm(ky, axis=1).max()))
    passed = lam_hat > 0 and lam_hat > 2.0 * lip_hat * (1.0 + rtol)
    return AuditReport(lam_hat, lip_hat, bound_hat, sample_count, float(radius), bool(passed))


def pairwise_force(model: ModelSpec, positions: np.ndarray, i: int) -> np.ndarray:
    """Mean-field interaction on particle ``i``: (1/(N-1)) sum_{j != i} K(x_j - x_i).

    Terms are accumulated in ascending j.
    """
    x = np.asarray(positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ModelError("pairwise_force needs at least two particles")
    if not 0 <= i < n:
        raise IndexError(f"particle index {i} out of range for N={n}")
    kvals = model.kernel(x - x[i])
    acc = np.zeros(x.shape[1])
    for j in range(n):
        if j != i:
            acc = acc + kvals[j]
    return acc / (n - 1)

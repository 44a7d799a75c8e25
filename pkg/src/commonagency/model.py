"""Core primitives: problem parameters, drift/cost specifications, the
contract generator ``G`` and the Agent's pointwise best response.

Arrays of sensitivities and efforts carry the state dimension on the last
axis, so every LQ routine broadcasts over leading (path or grid) axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .errors import ConfigError, NonConcaveHamiltonian

# Two maximizers are distinct if further apart than this with (almost) equal values.
MAXIMIZER_SEPARATION = 1e-6
MAXIMIZER_VALUE_TOL = 1e-10


def _as_vector(value, n: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if n is not None and arr.shape != (n,):
        raise ConfigError(f"expected length {n}, got {arr.shape[0]}", name)
    arr.setflags(write=False)
    return arr


def liquidation_weights(appetence: Sequence[float]) -> np.ndarray:
    """Row ``i`` holds the weights of the linear liquidation payoff of Principal ``i``.

    ``l_i(x) = x_i + gamma_i * (x_i - mean_{j != i} x_j)``.
    """
    gamma = np.asarray(appetence, dtype=float)
    n = gamma.size
    w = np.eye(n)
    if n > 1:
        for i in range(n):
            w[i] += gamma[i] * (np.eye(n)[i] - (1.0 - np.eye(n)[i]) / (n - 1))
    return w


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full problem specification shared by all solvers."""

    n_principals: int
    horizon: float
    x0: np.ndarray
    sigma: np.ndarray
    risk_aversion: float
    reservation_utility: float
    appetence: np.ndarray
    discount: float = 0.0
    # Certainty-equivalent reservation wage used only when risk_aversion == 0.
    neutral_reservation_wage: float = 0.0
    max_condition_number: float = 1e12

    def __post_init__(self):
        n = int(self.n_principals)
        if n < 1:
            raise ConfigError("must be >= 1", "n_principals")
        object.__setattr__(self, "n_principals", n)
        if not self.horizon > 0:
            raise ConfigError("must be > 0", "horizon")
        object.__setattr__(self, "x0", _as_vector(self.x0, n, "x0"))
        sigma = np.array(self.sigma, dtype=float)
        if sigma.shape != (n, n):
            raise ConfigError(f"expected shape ({n}, {n})", "sigma")
        cond = np.linalg.cond(sigma)
        if not np.isfinite(cond) or cond > self.max_condition_number:
            raise ConfigError(f"volatility matrix is not invertible (cond={cond:.3g})", "sigma")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        if self.risk_aversion < 0:
            raise ConfigError("must be >= 0", "risk_aversion")
        if not self.reservation_utility < 0:
            raise ConfigError("exponential utility is negative; need R0 < 0", "reservation_utility")
        gamma = _as_vector(self.appetence, n, "appetence")
        if np.any(gamma < 0) or np.any(gamma > 1):
            raise ConfigError("entries must lie in [0, 1]", "appetence")
        object.__setattr__(self, "appetence", gamma)
        if self.discount != 0:
            raise ConfigError("only zero discounting is supported", "discount")

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.sigma))

    @property
    def cov(self) -> np.ndarray:
        return self.sigma @ self.sigma.T

    @property
    def r0(self) -> float:
        """Reservation wage ``-ln(-R0)/R_A``: participation holds iff ``Y0 >= r0``."""
        if self.risk_aversion == 0:
            return float(self.neutral_reservation_wage)
        return -math.log(-self.reservation_utility) / self.risk_aversion + 0.0

    @property
    def payoff_weights(self) -> np.ndarray:
        return liquidation_weights(self.appetence)

    @property
    def aggregate_weights(self) -> np.ndarray:
        """Gradient of ``L = sum_i l_i`` (the vector Gamma)."""
        return self.payoff_weights.sum(axis=0)


@dataclass(frozen=True, eq=False)
class Payoff:
    """Liquidation payoff ``w.x + x^T Q x / 2``; ``Q = None`` means affine."""

    weights: np.ndarray
    curvature: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "weights", _as_vector(self.weights))
        if self.curvature is not None:
            q = np.array(self.curvature, dtype=float)
            n = self.weights.size
            if q.shape != (n, n):
                raise ConfigError(f"expected shape ({n}, {n})", "curvature")
            q = 0.5 * (q + q.T)
            q.setflags(write=False)
            object.__setattr__(self, "curvature", q)

    @property
    def affine(self) -> bool:
        return self.curvature is None

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = x @ self.weights + self.offset
        if self.curvature is not None:
            out = out + 0.5 * np.sum((x @ self.curvature) * x, axis=-1)
        return out

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        g = np.broadcast_to(self.weights, x.shape).copy()
        if self.curvature is not None:
            g += x @ self.curvature
        return g

    def __add__(self, other: "Payoff") -> "Payoff":
        if self.curvature is None and other.curvature is None:
            q = None
        else:
            n = self.weights.size
            q = (np.zeros((n, n)) if self.curvature is None else self.curvature) + (
                np.zeros((n, n)) if other.curvature is None else other.curvature)
        return Payoff(self.weights + other.weights, q, self.offset + other.offset)


def principal_payoffs(params: ModelParams) -> list[Payoff]:
    """Linear liquidation payoffs ``l_i`` of every Principal."""
    return [Payoff(w) for w in params.payoff_weights]


class DriftCostSpec:
    """Drift ``b(t, x, nu)`` (component ``i`` depends on ``nu_i`` only) and cost ``c``.

    Subclasses implement the pointwise pieces; ``best_response`` and
    ``response_jacobian`` are the Agent-side maps built on top of them.
    """

    n: int
    vectorized: bool = False
    is_lq: bool = False

    def drift(self, t, x, nu):
        raise NotImplementedError

    def cost(self, t, x, nu):
        raise NotImplementedError

    def best_response(self, t, x, z):
        raise NotImplementedError

    def response_jacobian(self, t, x, z, nu=None):
        """``d nu* / d z`` as an ``(N, N)`` matrix; ``nu`` may pass a known ``nu*(z)``."""
        raise NotImplementedError

    def local_response(self, t, x, z, nu0):
        """Best response refined locally from ``nu0`` (no global search)."""
        return self.best_response(t, x, z)

    def drift_jacobian(self, t, x, nu):
        """Diagonal of ``d b / d nu``."""
        raise NotImplementedError

    def hamiltonian_max(self, t, x, z):
        """``max_nu b.z - c`` and the maximizer."""
        nu = self.best_response(t, x, z)
        return float(np.dot(self.drift(t, x, nu), z) - self.cost(t, x, nu)), nu


class LinearQuadratic(DriftCostSpec):
    """``b = K nu`` with diagonal ``K`` and ``c = |nu|^2 / 2``."""

    vectorized = True
    is_lq = True

    def __init__(self, efficiency: Sequence[float]):
        k = np.array(efficiency, dtype=float).reshape(-1)
        if np.any(k <= 0):
            raise ConfigError("efficiencies must be > 0", "efficiency")
        k.setflags(write=False)
        self.k = k
        self.n = k.size

    @property
    def K(self) -> np.ndarray:
        return np.diag(self.k)

    def drift(self, t, x, nu):
        return np.asarray(nu, dtype=float) * self.k

    def cost(self, t, x, nu):
        nu = np.asarray(nu, dtype=float)
        return 0.5 * np.sum(nu * nu, axis=-1)

    def best_response(self, t, x, z):
        return np.asarray(z, dtype=float) * self.k

    def response_jacobian(self, t, x, z, nu=None):
        return np.diag(self.k)

    def drift_jacobian(self, t, x, nu):
        return self.k.copy()

    def hamiltonian_max(self, t, x, z):
        kz = np.asarray(z, dtype=float) * self.k
        return 0.5 * np.sum(kz * kz, axis=-1), kz

    def __repr__(self):
        return f"LinearQuadratic(efficiency={self.k.tolist()})"


def _fd_derivative(f, nu, h=1e-5):
    """Central differences of a componentwise map: returns ``d f_i / d nu_i``."""
    nu = np.asarray(nu, dtype=float)
    out = np.empty_like(nu)
    for i in range(nu.size):
        e = np.zeros_like(nu)
        e[i] = h
        out[i] = (f(nu + e)[i] - f(nu - e)[i]) / (2 * h)
    return out


def _fd_gradient(f, nu, h=1e-5):
    nu = np.asarray(nu, dtype=float)
    out = np.empty_like(nu)
    for i in range(nu.size):
        e = np.zeros_like(nu)
        e[i] = h
        out[i] = (f(nu + e) - f(nu - e)) / (2 * h)
    return out


def _fd_hessian(grad, nu, h=1e-5):
    nu = np.asarray(nu, dtype=float)
    n = nu.size
    out = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        out[:, i] = (grad(nu + e) - grad(nu - e)) / (2 * h)
    return 0.5 * (out + out.T)


class GenericSpec(DriftCostSpec):
    """Drift and cost given as callables of ``(t, x, nu)`` on a bounded effort box.

    Missing derivative callables fall back to central finite differences.
    The maximization is projected onto the box; distinct maximizers with equal
    value raise :class:`NonConcaveHamiltonian`.
    """

    def __init__(
        self,
        n: int,
        drift: Callable,
        cost: Callable,
        effort_box: tuple[Sequence[float], Sequence[float]],
        drift_dnu: Callable | None = None,
        drift_dnu2: Callable | None = None,
        cost_grad: Callable | None = None,
        cost_hess: Callable | None = None,
        n_starts: int | None = None,
        name: str = "generic",
    ):
        self.n = int(n)
        self._drift = drift
        self._cost = cost
        self._drift_dnu = drift_dnu
        self._drift_dnu2 = drift_dnu2
        self._cost_grad = cost_grad
        self._cost_hess = cost_hess
        lo, hi = effort_box
        self.lo = _as_vector(np.broadcast_to(lo, (self.n,)), self.n, "effort_box")
        self.hi = _as_vector(np.broadcast_to(hi, (self.n,)), self.n, "effort_box")
        if np.any(self.hi <= self.lo):
            raise ConfigError("upper bound must exceed lower bound", "effort_box")
        self.n_starts = n_starts
        self.name = name

    def __repr__(self):
        return f"GenericSpec(name={self.name!r}, n={self.n})"

    def drift(self, t, x, nu):
        return np.asarray(self._drift(t, x, np.asarray(nu, dtype=float)), dtype=float)

    def cost(self, t, x, nu):
        return float(self._cost(t, x, np.asarray(nu, dtype=float)))

    def drift_jacobian(self, t, x, nu):
        if self._drift_dnu is not None:
            return np.asarray(self._drift_dnu(t, x, nu), dtype=float)
        return _fd_derivative(lambda v: self.drift(t, x, v), nu)

    def _drift_second(self, t, x, nu):
        if self._drift_dnu2 is not None:
            return np.asarray(self._drift_dnu2(t, x, nu), dtype=float)
        return _fd_derivative(lambda v: self.drift_jacobian(t, x, v), nu)

    def _cost_grad_at(self, t, x, nu):
        if self._cost_grad is not None:
            return np.asarray(self._cost_grad(t, x, nu), dtype=float)
        return _fd_gradient(lambda v: self.cost(t, x, v), nu)

    def _cost_hess_at(self, t, x, nu):
        if self._cost_hess is not None:
            return np.asarray(self._cost_hess(t, x, nu), dtype=float)
        return _fd_hessian(lambda v: self._cost_grad_at(t, x, v), nu)

    def _objective_hessian(self, t, x, z, nu):
        return np.diag(self._drift_second(t, x, nu) * z) - self._cost_hess_at(t, x, nu)

    def _starts(self):
        center = np.clip(np.zeros(self.n), self.lo, self.hi)
        half = 0.5 * (self.hi - self.lo)
        mid = 0.5 * (self.hi + self.lo)
        starts = [center]
        for i in range(self.n):
            for s in (-0.8, 0.8):
                p = mid.copy()
                p[i] += s * half[i]
                starts.append(p)
        return starts[: self.n_starts] if self.n_starts else starts

    def _polish(self, t, x, z, nu):
        # Projected Newton on the free coordinates.
        for _ in range(30):
            free = (nu > self.lo + 1e-12) & (nu < self.hi - 1e-12)
            if not free.any():
                break
            g = self.drift_jacobian(t, x, nu) * z - self._cost_grad_at(t, x, nu)
            gf = g[free]
            if np.max(np.abs(gf)) < 1e-14:
                break
            hess = self._objective_hessian(t, x, z, nu)[np.ix_(free, free)]
            try:
                step = np.linalg.solve(hess, -gf)
            except np.linalg.LinAlgError:
                break
            nu = nu.copy()
            nu[free] = np.clip(nu[free] + step, self.lo[free], self.hi[free])
        return nu

    def best_response(self, t, x, z):
        z = np.asarray(z, dtype=float)
        if z.ndim > 1:
            flat = z.reshape(-1, self.n)
            xs = np.broadcast_to(np.asarray(x, dtype=float), z.shape).reshape(-1, self.n)
            out = np.array([self.best_response(t, xs[i], flat[i]) for i in range(flat.shape[0])])
            return out.reshape(z.shape)
        return self._maximize(t, x, z)[1]

    def _maximize(self, t, x, z):
        def neg(nu):
            return -(float(np.dot(self.drift(t, x, nu), z)) - self.cost(t, x, nu))

        def neg_grad(nu):
            return -(self.drift_jacobian(t, x, nu) * z - self._cost_grad_at(t, x, nu))

        bounds = list(zip(self.lo, self.hi))
        candidates = []
        for start in self._starts():
            res = optimize.minimize(
                neg, start, jac=neg_grad, method="L-BFGS-B", bounds=bounds,
                options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 500},
            )
            if not np.all(np.isfinite(res.x)):
                raise NonConcaveHamiltonian(f"effort maximization diverged at z={z.tolist()}")
            nu = self._polish(t, x, z, np.asarray(res.x, dtype=float))
            candidates.append((-neg(nu), nu))
        best_val, best_nu = max(candidates, key=lambda c: c[0])
        for val, nu in candidates:
            if (
                abs(val - best_val) <= MAXIMIZER_VALUE_TOL * max(1.0, abs(best_val))
                and np.linalg.norm(nu - best_nu) > MAXIMIZER_SEPARATION
            ):
                raise NonConcaveHamiltonian(
                    f"multiple effort maximizers at z={z.tolist()}: "
                    f"{best_nu.tolist()} and {nu.tolist()}"
                )
        return best_val, best_nu

    def hamiltonian_max(self, t, x, z):
        return self._maximize(t, x, np.asarray(z, dtype=float))

    def active_set(self, nu):
        return (nu <= self.lo + 1e-9) | (nu >= self.hi - 1e-9)

    def local_response(self, t, x, z, nu0):
        nu0 = np.clip(np.asarray(nu0, dtype=float), self.lo, self.hi)
        return self._polish(t, x, np.asarray(z, dtype=float), nu0)

    def response_jacobian(self, t, x, z, nu=None):
        z = np.asarray(z, dtype=float)
        if nu is None:
            nu = self.best_response(t, x, z)
        jac = np.zeros((self.n, self.n))
        free = ~self.active_set(nu)
        if free.any():
            hess = self._objective_hessian(t, x, z, nu)[np.ix_(free, free)]
            db = np.diag(self.drift_jacobian(t, x, nu))[free, :]
            jac[free, :] = -np.linalg.solve(hess, db)
        return jac


def polynomial_spec(efficiency: Sequence[float], quartic: float = 0.0,
                    effort_bound: float = 50.0) -> GenericSpec:
    """``b = K nu``, ``c = sum(nu_i^2 / 2 + q nu_i^4 / 4)`` on ``[-B, B]^N``.

    With ``q = 0`` this is the LQ model restricted to a box, which makes it a
    convenient test bed for the generic code path.
    """
    k = np.array(efficiency, dtype=float).reshape(-1)
    q = float(quartic)
    if q < 0:
        raise ConfigError("must be >= 0", "quartic")
    return GenericSpec(
        n=k.size,
        drift=lambda t, x, nu: k * nu,
        cost=lambda t, x, nu: float(np.sum(0.5 * nu**2 + 0.25 * q * nu**4)),
        effort_box=(-effort_bound, effort_bound),
        drift_dnu=lambda t, x, nu: k.copy(),
        drift_dnu2=lambda t, x, nu: np.zeros_like(k),
        cost_grad=lambda t, x, nu: nu + q * nu**3,
        cost_hess=lambda t, x, nu: np.diag(1.0 + 3.0 * q * nu**2),
        name=f"polynomial(q={q})",
    )


def double_well_spec(effort_bound: float = 3.0) -> GenericSpec:
    """One-dimensional cost ``(nu^2 - 1)^2 / 4`` with linear drift.

    The Hamiltonian ``nu z - c(nu)`` has two maximizers at ``z = 0``; used to
    exercise the non-concavity error path.
    """
    return GenericSpec(
        n=1,
        drift=lambda t, x, nu: nu.copy(),
        cost=lambda t, x, nu: float(0.25 * (nu[0] ** 2 - 1.0) ** 2),
        effort_box=(-effort_bound, effort_bound),
        drift_dnu=lambda t, x, nu: np.ones(1),
        drift_dnu2=lambda t, x, nu: np.zeros(1),
        cost_grad=lambda t, x, nu: nu**3 - nu,
        cost_hess=lambda t, x, nu: np.diag(3 * nu**2 - 1.0),
        name="double_well",
    )


def generator_G(t, x, z, params: ModelParams, spec: DriftCostSpec):
    """``G(t, x, z) = R_A/2 |Sigma^T z|^2 - max_nu (b.z - c)``.

    Broadcasts over leading axes of ``z`` for vectorized specs.
    """
    z = np.asarray(z, dtype=float)
    sz = z @ params.sigma
    risk = 0.5 * params.risk_aversion * np.sum(sz * sz, axis=-1)
    if spec.vectorized or z.ndim == 1:
        hmax, _ = spec.hamiltonian_max(t, x, z)
        return risk - hmax
    flat = z.reshape(-1, z.shape[-1])
    xs = np.broadcast_to(np.asarray(x, dtype=float), z.shape).reshape(-1, z.shape[-1])
    hmax = np.array([spec.hamiltonian_max(t, xs[i], flat[i])[0] for i in range(flat.shape[0])])
    return risk - hmax.reshape(z.shape[:-1])


def generator_gradient(t, x, z, params: ModelParams, spec: DriftCostSpec):
    """``grad_z G = R_A Sigma Sigma^T z - b(nu*(z))`` (envelope theorem)."""
    z = np.asarray(z, dtype=float)
    nu = spec.best_response(t, x, z)
    return params.risk_aversion * z @ params.cov.T - spec.drift(t, x, nu)


def best_response(t, x, z, spec: DriftCostSpec):
    """Agent's optimal effort ``argmax_nu b(t, x, nu).z - c(t, x, nu)``."""
    return spec.best_response(t, x, np.asarray(z, dtype=float))


@dataclass(frozen=True)
class EffortPolicy:
    """Feedback effort ``(t, X) -> nu`` evaluated on a batch ``X`` of shape ``(P, N)``."""

    func: Callable[[float, np.ndarray], np.ndarray]
    constant: np.ndarray | None = field(default=None, compare=False)

    @classmethod
    def constant_effort(cls, nu) -> "EffortPolicy":
        nu = np.array(nu, dtype=float)
        nu.setflags(write=False)
        return cls(lambda t, X: np.broadcast_to(nu, X.shape), constant=nu)

    def __call__(self, t: float, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.func(t, X), dtype=float)

    def check_bounded(self, lo, hi, horizon: float, n_samples: int = 256,
                      bound: float = 1e6, seed: int = 0) -> bool:
        rng = np.random.default_rng(seed)
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        X = lo + (hi - lo) * rng.random((n_samples, lo.size))
        for t in np.linspace(0.0, horizon, 5):
            v = self(t, X)
            if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > bound:
                return False
        return True


@dataclass(frozen=True)
class GrowthReport:
    """Smallest constants for ``|nu*| <= C(1+|z|^(1/m))`` and ``|G| <= C(1+|z|^2+|z||x|)``."""

    effort_constant: float
    generator_constant: float
    exponent: float
    n_samples: int
    violations: tuple = ()

    @property
    def constant(self) -> float:
        return max(self.effort_constant, self.generator_constant)


def growth_sanity(z_samples, spec: DriftCostSpec, params: ModelParams, x_samples=None,
                  t: float = 0.0, m_lower: float = 1.0,
                  claimed_constant: float | None = None) -> GrowthReport:
    """Fit the growth constants on samples; flag samples above ``claimed_constant``."""
    z = np.atleast_2d(np.asarray(z_samples, dtype=float))
    if z.shape[0] == 0:
        raise ValueError("need at least one sample")
    if x_samples is None:
        x = np.broadcast_to(params.x0, z.shape)
    else:
        x = np.broadcast_to(np.asarray(x_samples, dtype=float), z.shape)
    zn = np.linalg.norm(z, axis=1)
    xn = np.linalg.norm(x, axis=1)
    nu = np.array([spec.best_response(t, x[i], z[i]) for i in range(z.shape[0])])
    g = np.array([generator_G(t, x[i], z[i], params, spec) for i in range(z.shape[0])])
    exponent = 1.0 / m_lower
    ratio_nu = np.linalg.norm(nu, axis=1) / (1.0 + zn**exponent)
    ratio_g = np.abs(g) / (1.0 + zn**2 + zn * xn)
    violations = ()
    if claimed_constant is not None:
        bad = np.nonzero((ratio_nu > claimed_constant) | (ratio_g > claimed_constant))[0]
        violations = tuple(int(i) for i in bad)
    return GrowthReport(float(ratio_nu.max()), float(ratio_g.max()), exponent,
                        z.shape[0], violations)

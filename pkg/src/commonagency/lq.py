"""Closed-form solution of the two-Principal linear-quadratic model.

Efficiencies ``K = diag(k1, k2)``, quadratic effort cost, risk-neutral
Principals with appetence-weighted liquidation payoffs, and an Agent with
exponential utility of risk aversion ``R_A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, Degenerate, SingularMatrix
from .model import LinearQuadratic, ModelParams

DET_THRESHOLD = 1e-12
RHO_LIMIT = 1.0 - 1e-9

RECORD_COLUMNS = (
    "m11", "m12", "m21", "m22",
    "ma11", "ma12", "ma21", "ma22",
    "nu1", "nu2", "nua1", "nua2", "nufb1", "nufb2",
    "lambda", "lambda_tilde", "delta", "delta_a",
    "beta1_1", "beta1_2", "beta2_1", "beta2_2",
    "alpha_rate", "y1", "y2", "r0", "first_best_wage",
)


def correlated_sigma(rho: float) -> np.ndarray:
    return np.array([[1.0, 0.0], [rho, math.sqrt(max(0.0, 1.0 - rho * rho))]])


@dataclass(frozen=True, eq=False)
class LQParams:
    k1: float = 1.0
    k2: float = 1.0
    rho: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    risk_aversion: float = 1.0
    reservation_utility: float = -1.0
    horizon: float = 1.0
    x0: tuple = (0.0, 0.0)
    sigma: np.ndarray | None = None
    # Shares of the indeterminate initial transfer and drift among the Principals.
    y_shares: tuple = (0.5, 0.5)
    alpha_shares: tuple = (0.5, 0.5)

    def __post_init__(self):
        if not (self.k1 > 0 and self.k2 > 0):
            raise ConfigError("efficiencies must be > 0", "k1" if not self.k1 > 0 else "k2")
        if self.sigma is None:
            if not abs(self.rho) <= 1.0:
                raise ConfigError(f"correlation must lie in [-1, 1], got {self.rho}", "rho")
            if abs(self.rho) > RHO_LIMIT:
                raise ConfigError("|rho| = 1 makes the volatility matrix singular", "rho")
        else:
            sigma = np.array(self.sigma, dtype=float)
            if sigma.shape != (2, 2):
                raise ConfigError("expected a 2x2 matrix", "sigma")
            object.__setattr__(self, "sigma", sigma)
        for name in ("gamma1", "gamma2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError("appetence must lie in [0, 1]", name)
        if self.risk_aversion < 0:
            raise ConfigError("must be >= 0", "risk_aversion")
        if not self.reservation_utility < 0:
            raise ConfigError("need R0 < 0", "reservation_utility")
        if not self.horizon > 0:
            raise ConfigError("must be > 0", "horizon")
        for name in ("y_shares", "alpha_shares"):
            shares = getattr(self, name)
            if len(shares) != 2 or abs(sum(shares) - 1.0) > 1e-12:
                raise ConfigError("two shares summing to 1 required", name)

    @property
    def sigma_matrix(self) -> np.ndarray:
        return correlated_sigma(self.rho) if self.sigma is None else np.asarray(self.sigma)

    @property
    def K(self) -> np.ndarray:
        return np.diag([self.k1, self.k2])

    @property
    def Gamma(self) -> np.ndarray:
        return np.array([1.0 + self.gamma1 - self.gamma2, 1.0 + self.gamma2 - self.gamma1])

    @property
    def r0(self) -> float:
        return self.model_params().r0

    def model_params(self) -> ModelParams:
        return ModelParams(
            n_principals=2, horizon=self.horizon, x0=self.x0, sigma=self.sigma_matrix,
            risk_aversion=self.risk_aversion, reservation_utility=self.reservation_utility,
            appetence=(self.gamma1, self.gamma2),
        )

    def spec(self) -> LinearQuadratic:
        return LinearQuadratic((self.k1, self.k2))

    def replace(self, **changes) -> "LQParams":
        fields = {f: getattr(self, f) for f in self.__dataclass_fields__}
        fields.update(changes)
        return LQParams(**fields)


def inv2(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Adjugate inverse of a 2x2 matrix."""
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) < DET_THRESHOLD:
        raise SingularMatrix(f"{what} is numerically singular (det={det:.3e})")
    return np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det


@dataclass(frozen=True, eq=False)
class LQSolution:
    M: np.ndarray
    Ma: np.ndarray
    Gamma: np.ndarray
    nu_star: np.ndarray
    nu_aggregated: np.ndarray
    nu_first_best: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    lam: float
    lambda_tilde: float
    delta: float
    delta_a: float
    r0: float
    y_split: tuple
    alpha_split: tuple
    first_best_wage: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def beta_bar(self) -> np.ndarray:
        return self.beta1 + self.beta2

    @property
    def alpha_rate(self) -> float:
        """Common drift ``alpha^i`` under the default equal split."""
        return 0.5 * (self.alpha_split[0] + self.alpha_split[1])

    def record(self) -> dict:
        rec = {}
        for name, mat in (("m", self.M), ("ma", self.Ma)):
            for i in range(2):
                for j in range(2):
                    rec[f"{name}{i + 1}{j + 1}"] = float(mat[i, j])
        rec.update(
            nu1=self.nu_star[0], nu2=self.nu_star[1],
            nua1=self.nu_aggregated[0], nua2=self.nu_aggregated[1],
            nufb1=self.nu_first_best[0], nufb2=self.nu_first_best[1],
            lambda_tilde=self.lambda_tilde, delta=self.delta, delta_a=self.delta_a,
            alpha_rate=self.alpha_rate, y1=self.y_split[0], y2=self.y_split[1], r0=self.r0,
            first_best_wage=self.first_best_wage,
        )
        rec["lambda"] = self.lam
        for i, beta in enumerate((self.beta1, self.beta2), start=1):
            for j in range(2):
                rec[f"beta{i}_{j + 1}"] = float(beta[j])
        return {k: (None if rec[k] is None else float(rec[k])) for k in RECORD_COLUMNS}


def _generator(params: LQParams, z: np.ndarray) -> float:
    sigma = params.sigma_matrix
    kz = params.K @ z
    sz = sigma.T @ z
    return 0.5 * params.risk_aversion * float(sz @ sz) - 0.5 * float(kz @ kz)


def solve(params: LQParams) -> LQSolution:
    """Equilibrium contracts, value-function coefficients and benchmarks."""
    ra = params.risk_aversion
    sigma = params.sigma_matrix
    cov = sigma @ sigma.T
    k = np.array([params.k1, params.k2])
    K = np.diag(k)
    K2 = np.diag(k * k)
    Kinv2 = np.diag(1.0 / (k * k))
    gamma = params.Gamma

    M = inv2(np.eye(2) + 2.0 * ra * Kinv2 @ cov, "I + 2 K^-2 R_A Sigma Sigma^T")
    Ma = inv2(ra * cov + K2, "R_A Sigma Sigma^T + K^2") @ K2

    m = M @ gamma
    ma = Ma @ gamma
    km = K @ m
    kma = K @ ma
    sm = sigma.T @ m
    sma = sigma.T @ ma
    risk = float(sm @ sm)
    effort = float(km @ km)
    drive = float(gamma @ K2 @ m)

    lam = drive - 0.5 * ra * risk - 0.5 * effort
    lam_t = drive - 1.25 * ra * risk - 0.75 * effort
    delta = 0.5 * ra * risk + 0.5 * effort
    delta_a = 0.5 * ra * float(sma @ sma) + 0.5 * float(kma @ kma)

    shift = ra * Kinv2 @ cov @ m
    grad_v1 = np.array([1.0 + params.gamma1, -params.gamma1])
    grad_v2 = np.array([-params.gamma2, 1.0 + params.gamma2])
    beta1 = grad_v1 - shift
    beta2 = grad_v2 - shift

    r0 = params.r0
    g = _generator(params, m)
    ys, as_ = params.y_shares, params.alpha_shares
    wage = None
    if ra > 0:
        wage = first_best(params)[1]
    return LQSolution(
        M=M, Ma=Ma, Gamma=gamma, nu_star=km, nu_aggregated=kma, nu_first_best=K @ gamma,
        beta1=beta1, beta2=beta2, lam=lam, lambda_tilde=lam_t, delta=delta, delta_a=delta_a,
        r0=r0, y_split=(ys[0] * r0, ys[1] * r0), alpha_split=(as_[0] * g, as_[1] * g),
        first_best_wage=wage,
    )


def value_V(t: float, x, sol: LQSolution, params: LQParams) -> float:
    x = np.asarray(x, dtype=float)
    return float(x @ sol.Gamma + sol.lam * (params.horizon - t))


def value_vi(i: int, t: float, x, sol: LQSolution, params: LQParams) -> float:
    """Value of Principal ``i`` (1-based) before subtracting her transfer ``y^i``."""
    x = np.asarray(x, dtype=float)
    if i == 1:
        w = np.array([1.0 + params.gamma1, -params.gamma1])
    elif i == 2:
        w = np.array([-params.gamma2, 1.0 + params.gamma2])
    else:
        raise ValueError("principal index must be 1 or 2")
    return float(sol.lambda_tilde * (params.horizon - t) + w @ x)


def hjb_residuals(sol: LQSolution, params: LQParams, t: float = 0.0, x=(0.0, 0.0)) -> dict:
    """Residuals of the two Principals' HJB equations and first-order conditions.

    All derivatives of the affine value functions are exact, so every entry
    should vanish up to rounding.
    """
    ra = params.risk_aversion
    sigma = params.sigma_matrix
    cov = sigma @ sigma.T
    K2 = params.K @ params.K
    Kinv2 = np.diag(1.0 / np.diag(K2))
    bb = sol.beta_bar
    grads = (np.array([1.0 + params.gamma1, -params.gamma1]),
             np.array([-params.gamma2, 1.0 + params.gamma2]))
    betas = (sol.beta1, sol.beta2)
    dt_v = -sol.lambda_tilde
    sb = sigma.T @ bb
    kb = params.K @ bb
    out = {}
    for i in range(2):
        other_alpha = sol.alpha_split[1 - i]
        inner = (grads[i] @ K2 @ bb - 0.5 * ra * float(sb @ sb) + 0.5 * float(kb @ kb)
                 + other_alpha - (K2 @ bb) @ betas[i])
        out[f"hjb{i + 1}"] = abs(-dt_v - inner)
        foc = betas[i] - (grads[i] - ra * Kinv2 @ cov @ bb)
        out[f"foc{i + 1}"] = float(np.max(np.abs(foc)))
    out["alpha_sum"] = abs(sum(sol.alpha_split) - (0.5 * ra * float(sb @ sb) - 0.5 * float(kb @ kb)))
    out["aggregate"] = abs(sol.lam - (sol.Gamma @ K2 @ bb - 0.5 * ra * float(sb @ sb)
                                      - 0.5 * float(kb @ kb)))
    return out


def first_best(params: LQParams) -> tuple[np.ndarray, float]:
    """First-best effort ``K Gamma`` and total deterministic wage.

    The wage reimburses the effort cost over the horizon and pays the
    reservation certainty equivalent: ``T |K Gamma|^2 / 2 - ln(-R0) / R_A``.
    """
    if not params.risk_aversion > 0:
        raise ValueError("first-best wage requires R_A > 0")
    effort = params.K @ params.Gamma
    wage = params.horizon * 0.5 * float(effort @ effort) - math.log(-params.reservation_utility) / params.risk_aversion
    return effort, wage


@dataclass(frozen=True)
class CorrelatedEfforts:
    matrix_route: np.ndarray
    printed_route: np.ndarray
    discrepancy: float


def printed_component_efforts(params: LQParams) -> np.ndarray:
    """Effort components from the explicit rational expressions for the
    correlated model (``Sigma = [[1, 0], [rho, sqrt(1 - rho^2)]]``), kept
    verbatim for comparison with the matrix route."""
    ra, rho = params.risk_aversion, params.rho
    k1, k2 = params.k1, params.k2
    g1, g2 = params.Gamma
    den = 2 * ra**2 * (rho**2 - 1) - 2 * ra * (k1**2 + k2**2) - k1**2 * k2**2
    nu1 = (2 * ra * k1 * (g2 * k2**2 * rho - g1 * k1**2) - k1**3 * k2**2 * g1) / den
    nu2 = (2 * ra * k2 * (g1 * k1**2 * rho - g2 * k2**2) - k1**2 * k2**3 * g2) / den
    return np.array([nu1, nu2])


def effort_components_correlated(params: LQParams) -> CorrelatedEfforts:
    if params.sigma is not None:
        raise ValueError("the component expressions assume the correlation parametrization")
    if not abs(params.rho) < 1:
        raise ValueError("need |rho| < 1")
    matrix = solve(params).nu_star
    printed = printed_component_efforts(params)
    return CorrelatedEfforts(matrix, printed, float(np.max(np.abs(matrix - printed))))


def proportion_gap(rho: float, params: LQParams) -> float:
    """``d(rho) = (nu1 - nu2) / (nu1 + nu2)`` for equal efficiencies, closed form."""
    if params.k1 != params.k2:
        raise ValueError("proportion gap formula needs k1 == k2")
    if not -1.0 <= rho < 1.0:
        raise ValueError("rho must lie in [-1, 1)")
    k, ra = params.k1, params.risk_aversion
    # nu1 + nu2 = 2k / (1 + 2 R_A (1 + rho) / k^2) > 0 for k > 0
    total = 2.0 * k / (1.0 + 2.0 * ra * (1.0 + rho) / k**2)
    den = 2 * ra * k**3 * (1 - rho) + k**5
    if total == 0 or den == 0:
        raise Degenerate("total effort vanishes")
    return (params.gamma1 - params.gamma2) * (2 * ra * k**3 * (1 + rho) + k**5) / den


def dominance_threshold(x: float) -> float:
    """``f(x) = (1 + x) / (1 - x)`` on ``[-1, 1)``; infinite at ``x = 1``."""
    if x >= 1.0:
        return math.inf
    return (1.0 + x) / (1.0 - x)


def dominance_condition(params: LQParams) -> tuple[bool, float]:
    """Whether a risk-neutral Agent with identity volatility works more for Principal 1."""
    if params.risk_aversion != 0:
        raise ValueError("dominance condition is stated for R_A = 0")
    if not np.allclose(params.sigma_matrix, np.eye(2)):
        raise ValueError("dominance condition is stated for Sigma = I")
    x = params.gamma2 - params.gamma1
    threshold = dominance_threshold(x)
    if math.isinf(threshold):
        return False, threshold
    works_more = params.k1 * (1 + params.gamma1 - params.gamma2) > params.k2 * (1 + params.gamma2 - params.gamma1)
    return bool(works_more), threshold


def proportion_gap_matrix(params: LQParams) -> float:
    """``(nu1 - nu2) / (nu1 + nu2)`` from the matrix route, any efficiencies."""
    nu = solve(params).nu_star
    total = nu[0] + nu[1]
    if total == 0:
        raise Degenerate("total effort vanishes")
    return float((nu[0] - nu[1]) / total)

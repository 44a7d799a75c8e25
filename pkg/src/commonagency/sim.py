"""Monte Carlo engine for output paths, contract accrual and equilibrium checks.

Paths are simulated in fixed-size blocks. Block ``b`` draws its Gaussians
from a Philox stream keyed by ``(seed, b)``, so every path is reproducible
regardless of how many worker threads run the blocks. Contracts and the
Agent's running cost are accrued on the fly with left-endpoint (Ito) sums,
so memory stays proportional to the block size unless paths are kept.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import BestResponseViolation, ConfigError, NashViolation, NumericOverflow
from .model import DriftCostSpec, EffortPolicy, ModelParams, Payoff, generator_G, principal_payoffs

OVERFLOW_BOUND = 1e9
DEFAULT_OFFSETS = (-0.2, -0.05, 0.05, 0.2)
LOCAL_CERTIFICATION_NOTE = (
    "non-deviation is certified only against the tested perturbations, not all admissible contracts"
)


def _policy_eval(func, t, X, width):
    out = np.asarray(func(t, X), dtype=float)
    return np.ascontiguousarray(np.broadcast_to(out, (X.shape[0],) + width))


@dataclass(frozen=True, eq=False)
class ContractTriple:
    """``xi = y + int alpha(t, X) dt + int beta(t, X) . dX``.

    ``alpha`` and ``beta`` are either constants or callables on a batch of
    states ``X`` of shape ``(P, N)``.
    """

    y: float
    alpha: float | Callable = 0.0
    beta: np.ndarray | Callable = None

    def __post_init__(self):
        object.__setattr__(self, "y", float(self.y))
        if not callable(self.alpha):
            object.__setattr__(self, "alpha", float(self.alpha))
        if self.beta is None:
            raise ConfigError("beta is required", "contract.beta")
        if not callable(self.beta):
            b = np.array(self.beta, dtype=float).reshape(-1)
            b.setflags(write=False)
            object.__setattr__(self, "beta", b)

    @property
    def is_constant(self) -> bool:
        return not callable(self.alpha) and not callable(self.beta)

    def alpha_at(self, t, X) -> np.ndarray:
        if callable(self.alpha):
            return _policy_eval(self.alpha, t, X, ())
        return np.full(X.shape[0], self.alpha)

    def beta_at(self, t, X) -> np.ndarray:
        if callable(self.beta):
            return _policy_eval(self.beta, t, X, (X.shape[1],))
        return np.ascontiguousarray(np.broadcast_to(self.beta, X.shape))

    def check_bounded(self, lo, hi, horizon: float, n_samples: int = 256, bound: float = 1e6,
                      seed: int = 0) -> bool:
        rng = np.random.default_rng(seed)
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        X = lo + (hi - lo) * rng.random((n_samples, lo.size))
        for t in np.linspace(0.0, horizon, 5):
            for v in (self.alpha_at(t, X), self.beta_at(t, X)):
                if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > bound:
                    return False
        return True


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 10_000
    dt: float = 1e-2
    seed: int = 0
    antithetic: bool = True
    block_size: int = 4096
    threads: int = 1
    budget: float = 1e10
    keep_paths: bool = False
    record_stride: int = 1

    def __post_init__(self):
        if self.n_paths < 100:
            raise ConfigError("need at least 100 paths", "simulation.n_paths")
        if not self.dt > 0:
            raise ConfigError("must be > 0", "simulation.dt")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("must be an unsigned 64-bit integer", "simulation.seed")
        if self.block_size < 2 or self.block_size % 2:
            raise ConfigError("must be an even integer >= 2", "simulation.block_size")
        if self.antithetic and self.n_paths % 2:
            raise ConfigError("antithetic sampling needs an even path count", "simulation.n_paths")
        if self.threads < 1:
            raise ConfigError("must be >= 1", "simulation.threads")
        if self.record_stride < 1:
            raise ConfigError("must be >= 1", "simulation.record_stride")

    def steps(self, horizon: float) -> tuple[int, float]:
        if self.dt > horizon * (1 + 1e-12):
            raise ConfigError("dt exceeds the horizon", "simulation.dt")
        n = max(1, math.ceil(horizon / self.dt - 1e-9))
        if n * self.n_paths > self.budget:
            raise ConfigError(f"{n * self.n_paths:.3g} path-steps exceed the budget",
                              "simulation.budget")
        return n, horizon / n


@dataclass(eq=False)
class PathEnsemble:
    """Terminal states, accrued contracts and effort cost for every path.

    With ``keep_paths`` the states and contract values at every
    ``record_stride``-th step are also stored in ``states`` and ``xi_path``.
    """

    times: np.ndarray
    X_T: np.ndarray
    xi: np.ndarray
    cost: np.ndarray
    antithetic: bool
    record_times: np.ndarray | None = None
    states: np.ndarray | None = None
    xi_path: np.ndarray | None = None
    policy: EffortPolicy | None = field(default=None, repr=False)
    contracts: tuple = ()

    @property
    def n_paths(self) -> int:
        return self.X_T.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def mean_and_se(values: np.ndarray, antithetic: bool) -> tuple[float, float]:
    """Sample mean and its standard error; antithetic pairs are averaged first."""
    values = np.asarray(values, dtype=float)
    if antithetic:
        units = 0.5 * (values[0::2] + values[1::2])
    else:
        units = values
    mean = float(np.mean(values))
    if units.size < 2:
        return mean, math.inf
    return mean, float(np.std(units, ddof=1) / math.sqrt(units.size))


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))


def _run_block(block, size, params, spec, policy, contracts, config, n_steps, dt, rec_steps):
    n = params.n_principals
    nc = len(contracts)
    rng = _block_rng(config.seed, block)
    X = np.ascontiguousarray(np.broadcast_to(params.x0, (size, n)))
    xi = np.ascontiguousarray(np.broadcast_to([c.y for c in contracts], (size, nc))) \
        if nc else np.zeros((size, 0))
    cost = np.zeros(size)
    sigma = np.ascontiguousarray(params.sigma)
    sqdt = math.sqrt(dt)
    constant_contracts = all(c.is_constant for c in contracts)
    if constant_contracts:
        alpha = np.ascontiguousarray(np.broadcast_to([c.alpha for c in contracts], (size, nc)))
        beta = np.ascontiguousarray(np.broadcast_to(
            np.array([c.beta for c in contracts]).reshape(nc, n), (size, nc, n)))
    const_nu = policy.constant
    if const_nu is not None:
        nu = np.ascontiguousarray(np.broadcast_to(const_nu, (size, n)))
    states, xis = [], []
    if rec_steps is not None:
        states.append(X.copy())
        xis.append(xi.copy())
    for s in range(n_steps):
        t = s * dt
        if config.antithetic:
            g = rng.standard_normal((size // 2, n))
            dW = np.empty((size, n))
            dW[0::2] = g
            dW[1::2] = -g
            dW *= sqdt
        else:
            dW = rng.standard_normal((size, n)) * sqdt
        if const_nu is None:
            nu = _policy_eval(policy, t, X, (n,))
        if spec.vectorized:
            drift = np.ascontiguousarray(np.broadcast_to(spec.drift(t, X, nu), (size, n)))
            rate = np.ascontiguousarray(np.broadcast_to(spec.cost(t, X, nu), (size,)))
        else:
            drift = np.array([spec.drift(t, X[p], nu[p]) for p in range(size)])
            rate = np.array([spec.cost(t, X[p], nu[p]) for p in range(size)])
        if not constant_contracts:
            alpha = np.ascontiguousarray(np.stack([c.alpha_at(t, X) for c in contracts], axis=1))
            beta = np.ascontiguousarray(np.stack([c.beta_at(t, X) for c in contracts], axis=1))
        kernels.em_step(X, drift, sigma, dW, dt, alpha, beta, xi, rate, cost)
        if rec_steps is not None and (s + 1) in rec_steps:
            states.append(X.copy())
            xis.append(xi.copy())
    if not np.all(np.isfinite(X)) or np.max(np.abs(X)) > OVERFLOW_BOUND:
        raise NumericOverflow(f"a path left [-{OVERFLOW_BOUND:g}, {OVERFLOW_BOUND:g}]^N")
    return X, xi, cost, states, xis


def simulate_paths(params: ModelParams, spec: DriftCostSpec, policy: EffortPolicy,
                   config: SimConfig, contracts: Sequence[ContractTriple] = ()) -> PathEnsemble:
    """Euler-Maruyama paths of ``dX = b(t, X, nu) dt + Sigma dW`` under a feedback effort.

    The given contracts and the Agent's effort cost are accrued along the way.
    """
    n_steps, dt = config.steps(params.horizon)
    nc = len(contracts)
    contracts = tuple(contracts)
    rec_steps = None
    record_times = None
    if config.keep_paths:
        stride = config.record_stride
        rec = sorted(set(range(stride, n_steps + 1, stride)) | {n_steps})
        rec_steps = set(rec)
        record_times = np.array([0.0] + [k * dt for k in rec])
    sizes = []
    left = config.n_paths
    while left > 0:
        sizes.append(min(config.block_size, left))
        left -= sizes[-1]

    def work(b):
        return _run_block(b, sizes[b], params, spec, policy, contracts, config, n_steps, dt,
                          rec_steps)

    if config.threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, range(len(sizes))))
    else:
        results = [work(b) for b in range(len(sizes))]
    X_T = np.concatenate([r[0] for r in results])
    xi = np.concatenate([r[1] for r in results]).reshape(X_T.shape[0], nc)
    cost = np.concatenate([r[2] for r in results])
    states = xi_path = None
    if config.keep_paths:
        states = np.concatenate([np.stack(r[3]) for r in results], axis=1)
        xi_path = np.concatenate([np.stack(r[4]) for r in results], axis=1)
    times = np.linspace(0.0, params.horizon, n_steps + 1)
    return PathEnsemble(times, X_T, xi, cost, config.antithetic, record_times, states, xi_path,
                        policy, contracts)


def accrue_contract(paths: PathEnsemble, contract: ContractTriple) -> np.ndarray:
    """Terminal ``xi`` per path from stored states (needs ``keep_paths`` with stride 1)."""
    if paths.states is None:
        raise ValueError("paths were simulated without keep_paths")
    if paths.record_times.size != paths.times.size:
        raise ValueError("accrual needs every step recorded (record_stride=1)")
    dt = paths.dt
    xi = np.full(paths.n_paths, contract.y)
    for s in range(paths.times.size - 1):
        X = paths.states[s]
        dX = paths.states[s + 1] - X
        t = paths.times[s]
        xi = xi + (contract.alpha_at(t, X) * dt + np.sum(contract.beta_at(t, X) * dX, axis=1))
    return xi


def agent_utility(paths: PathEnsemble, params: ModelParams,
                  xi: np.ndarray | None = None) -> tuple[float, float]:
    """Mean of ``-exp(-R_A (sum_i xi^i - int c dt))`` with its standard error."""
    total = paths.xi.sum(axis=1) if xi is None else np.asarray(xi).reshape(paths.n_paths, -1).sum(axis=1)
    return mean_and_se(-np.exp(-params.risk_aversion * (total - paths.cost)), paths.antithetic)


def principal_payoff_samples(paths: PathEnsemble, params: ModelParams,
                             payoffs: Sequence[Payoff] | None = None) -> np.ndarray:
    """Per-path ``l_i(X_T) - xi^i``, shape ``(P, N)``."""
    payoffs = principal_payoffs(params) if payoffs is None else payoffs
    return np.stack([p.value(paths.X_T) - paths.xi[:, i] for i, p in enumerate(payoffs)], axis=1)


# Contracts ------------------------------------------------------------------------


def aggregate_sensitivity(contracts: Sequence[ContractTriple]) -> Callable:
    """``(t, X) -> sum_i beta^i(t, X)``."""
    def z(t, X):
        out = contracts[0].beta_at(t, X)
        for c in contracts[1:]:
            out = out + c.beta_at(t, X)
        return out
    return z


def response_policy(contracts: Sequence[ContractTriple], spec: DriftCostSpec) -> EffortPolicy:
    """The Agent's best response ``nu*(t, X, sum_i beta^i)`` to the given contracts."""
    if all(not callable(c.beta) for c in contracts):
        z = contracts[0].beta
        for c in contracts[1:]:
            z = z + c.beta
        return EffortPolicy.constant_effort(spec.best_response(0.0, None, z))
    zf = aggregate_sensitivity(contracts)

    def func(t, X):
        Z = zf(t, X)
        if spec.vectorized:
            return spec.best_response(t, X, Z)
        return np.array([spec.best_response(t, X[p], Z[p]) for p in range(X.shape[0])])

    return EffortPolicy(func)


def offset_policy(policy: EffortPolicy, offset) -> EffortPolicy:
    offset = np.array(offset, dtype=float)
    if policy.constant is not None:
        return EffortPolicy.constant_effort(policy.constant + offset)
    return EffortPolicy(lambda t, X: policy(t, X) + offset)


def lq_equilibrium_contracts(lq_params, params: ModelParams | None = None) -> tuple:
    """Constant equilibrium contracts of the two-Principal LQ model.

    ``alpha^i`` is the Principal's share of ``G(sum_j beta^j)``, evaluated on
    the same summed sensitivity the simulator uses.
    """
    from . import lq

    sol = lq.solve(lq_params)
    params = lq_params.model_params() if params is None else params
    spec = lq_params.spec()
    z = sol.beta1 + sol.beta2
    g = float(generator_G(0.0, params.x0, z, params, spec))
    shares = lq_params.alpha_shares
    return tuple(ContractTriple(sol.y_split[i], shares[i] * g, beta)
                 for i, beta in enumerate((sol.beta1, sol.beta2)))


def contracts_from_grid(gs, params: ModelParams, spec: DriftCostSpec) -> tuple:
    """Feedback contracts interpolated (linearly in t and x) from a grid solution.

    ``alpha^i = G(t, X, sum_j beta^j) / N`` and ``y^i = r0 / N`` keep the
    participation constraint binding. States outside the box are clamped.
    """
    from scipy.interpolate import RegularGridInterpolator

    grid = gs.grid
    n = gs.n_principals
    axes = [gs.times] + grid.axes
    lo = np.concatenate([[0.0], grid.lo])
    hi = np.concatenate([[grid.horizon], grid.hi])
    interps = []
    for i in range(n):
        values = np.moveaxis(gs.beta_i[i], 1, -1)
        interps.append(RegularGridInterpolator(axes, values, method="linear"))

    def make_beta(i):
        def beta(t, X):
            q = np.concatenate([np.full((X.shape[0], 1), t), X], axis=1)
            return interps[i](np.clip(q, lo, hi))
        return beta

    betas = [make_beta(i) for i in range(n)]

    def total(t, X):
        out = betas[0](t, X)
        for b in betas[1:]:
            out = out + b(t, X)
        return out

    def alpha(t, X):
        return generator_G(t, X, total(t, X), params, spec) / n

    return tuple(ContractTriple(params.r0 / n, alpha, betas[i]) for i in range(n))


# Checks ----------------------------------------------------------------------------


@dataclass
class SimReport:
    agent_utility: tuple
    predicted_agent_utility: float
    principal_payoffs: list
    equilibrium_residuals: dict = field(default_factory=dict)
    deviation_table: list = field(default_factory=list)
    best_response_table: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "agent_utility": {"estimate": self.agent_utility[0], "se": self.agent_utility[1]},
            "predicted_agent_utility": self.predicted_agent_utility,
            "principal_payoffs": [{"estimate": e, "se": s} for e, s in self.principal_payoffs],
            "equilibrium_residuals": self.equilibrium_residuals,
            "deviation_table": self.deviation_table,
            "best_response_table": self.best_response_table,
            "notes": list(self.notes),
            "settings": self.settings,
        }


def agent_best_response_check(contracts: Sequence[ContractTriple], spec: DriftCostSpec,
                              params: ModelParams, config: SimConfig,
                              offsets: Sequence[float] = DEFAULT_OFFSETS,
                              extra_policies: dict | None = None,
                              raise_on_violation: bool = True) -> list:
    """Compare the Agent's utility under ``nu*`` with offset and extra policies.

    Every policy reuses the same seed, so differences are paired. A row with
    ``delta > 2 se`` means the candidate beats the best response.
    """
    base = response_policy(contracts, spec)
    ref = simulate_paths(params, spec, base, config, contracts)
    u_ref = -np.exp(-params.risk_aversion * (ref.xi.sum(axis=1) - ref.cost))
    candidates = []
    for j in range(params.n_principals):
        for eps in offsets:
            e = np.zeros(params.n_principals)
            e[j] = eps
            candidates.append((f"offset e{j + 1} {eps:+g}", offset_policy(base, e)))
    for name, pol in (extra_policies or {}).items():
        candidates.append((name, pol))
    rows = []
    for name, pol in candidates:
        run = simulate_paths(params, spec, pol, config, contracts)
        u = -np.exp(-params.risk_aversion * (run.xi.sum(axis=1) - run.cost))
        est, se = mean_and_se(u - u_ref, config.antithetic)
        rows.append({"policy": name, "delta": est, "se": se, "violation": bool(est > 2 * se)})
    bad = [r for r in rows if r["violation"]]
    if bad and raise_on_violation:
        raise BestResponseViolation(f"{bad[0]['policy']} beats the best response", rows)
    return rows


@dataclass(frozen=True)
class Deviation:
    """Replacement of Principal ``principal``'s contract (0-based index).

    ``beta_offset`` is added to her sensitivity, or ``beta`` replaces it.
    ``alpha`` is ``"binding"`` (participation kept binding given the others),
    ``"keep"`` or a constant rate. Her ``y`` restores ``sum_j y^j = r0``.
    """

    principal: int
    beta_offset: tuple | None = None
    beta: tuple | None = None
    alpha: str | float = "binding"
    label: str = ""

    def name(self) -> str:
        if self.label:
            return self.label
        if self.beta is not None:
            return f"beta{self.principal + 1}={list(self.beta)}"
        return f"beta{self.principal + 1}+{list(self.beta_offset or ())}"


def apply_deviation(contracts: Sequence[ContractTriple], dev: Deviation, spec: DriftCostSpec,
                    params: ModelParams) -> tuple:
    i = dev.principal
    if not 0 <= i < len(contracts):
        raise ConfigError(f"no Principal {i}", "deviation.principal")
    own = contracts[i]
    others = [c for j, c in enumerate(contracts) if j != i]
    if dev.beta is not None:
        beta = np.array(dev.beta, dtype=float)
    elif callable(own.beta):
        off = np.array(dev.beta_offset or 0.0, dtype=float)
        beta = (lambda f: (lambda t, X: f(t, X) + off))(own.beta)
    else:
        beta = own.beta + np.array(dev.beta_offset or 0.0, dtype=float)
    y = params.r0 - sum(c.y for c in others)
    trial = list(contracts)
    trial[i] = ContractTriple(y, 0.0, beta)
    if dev.alpha == "keep":
        alpha = own.alpha
    elif dev.alpha == "binding":
        zf = aggregate_sensitivity(trial)
        if all(not callable(c.beta) for c in trial) and all(not callable(c.alpha) for c in others):
            z = zf(0.0, np.atleast_2d(params.x0))[0]
            alpha = float(generator_G(0.0, params.x0, z, params, spec)) - sum(c.alpha for c in others)
        else:
            def alpha(t, X):
                out = generator_G(t, X, zf(t, X), params, spec)
                for c in others:
                    out = out - c.alpha_at(t, X)
                return out
    else:
        alpha = float(dev.alpha)
    trial[i] = ContractTriple(y, alpha, beta)
    return tuple(trial)


def nash_deviation_check(contracts: Sequence[ContractTriple], deviations: Sequence[Deviation],
                         spec: DriftCostSpec, params: ModelParams, config: SimConfig,
                         payoffs: Sequence[Payoff] | None = None,
                         raise_on_violation: bool = True) -> list:
    """Payoff change of each deviating Principal, with paired standard errors.

    The Agent re-optimizes against the deviated contracts; every run shares
    the same seed so identical contracts give an exactly zero delta.
    """
    payoffs = principal_payoffs(params) if payoffs is None else payoffs
    base = simulate_paths(params, spec, response_policy(contracts, spec), config, contracts)
    base_pay = principal_payoff_samples(base, params, payoffs)
    rows = []
    for dev in deviations:
        trial = apply_deviation(contracts, dev, spec, params)
        run = simulate_paths(params, spec, response_policy(trial, spec), config, trial)
        pay = principal_payoff_samples(run, params, payoffs)
        i = dev.principal
        est, se = mean_and_se(pay[:, i] - base_pay[:, i], config.antithetic)
        u, u_se = agent_utility(run, params)
        row = {"deviation": dev.name(), "principal": i + 1, "delta": est, "se": se,
               "agent_utility": u, "agent_utility_se": u_se, "violation": bool(est > 2 * se)}
        if dev.beta_offset is not None:
            row["offset"] = [float(v) for v in dev.beta_offset]
        rows.append(row)
    bad = [r for r in rows if r["violation"]]
    if bad and raise_on_violation:
        raise NashViolation(f"deviation {bad[0]['deviation']} improves Principal "
                            f"{bad[0]['principal']}", rows)
    return rows


def offset_deviations(principal: int, offsets: Sequence[float] = DEFAULT_OFFSETS,
                      n: int = 2) -> list:
    """Constant sensitivity offsets on the full grid ``offsets^n``."""
    grids = np.meshgrid(*([np.asarray(offsets, dtype=float)] * n), indexing="ij")
    combos = np.stack([g.ravel() for g in grids], axis=1)
    return [Deviation(principal, tuple(float(v) for v in c)) for c in combos]


def fit_concave_profile(offsets, deltas) -> dict:
    """Least-squares quadratic ``a s^2 + b s + c``; reports curvature and vertex."""
    a, b, c = np.polyfit(np.asarray(offsets, dtype=float), np.asarray(deltas, dtype=float), 2)
    vertex = -b / (2 * a) if a != 0 else math.nan
    return {"a": float(a), "b": float(b), "c": float(c), "vertex": float(vertex),
            "concave": bool(a < 0)}


def equilibrium_residuals(contracts: Sequence[ContractTriple], spec: DriftCostSpec,
                          params: ModelParams, paths: PathEnsemble, y0: float | None = None,
                          z_ref: Callable | np.ndarray | None = None) -> dict:
    """Sup-norm gaps of the equilibrium sum conditions along the recorded states.

    ``|sum y - Y0|``, ``|sum alpha - G(t, X, sum beta)|`` and
    ``|sum beta - Z|`` with ``Y0 = r0`` and ``Z`` the reference sensitivity.
    """
    if paths.states is None:
        raise ValueError("paths were simulated without keep_paths")
    y0 = params.r0 if y0 is None else y0
    zf = aggregate_sensitivity(contracts)
    res = {"y": abs(sum(c.y for c in contracts) - y0), "alpha": 0.0, "beta": 0.0}
    for t, X in zip(paths.record_times, paths.states):
        Z = zf(t, X)
        a = sum(c.alpha_at(t, X) for c in contracts)
        g = generator_G(t, X, Z, params, spec)
        res["alpha"] = max(res["alpha"], float(np.max(np.abs(a - g))))
        if z_ref is not None:
            ref = z_ref(t, X) if callable(z_ref) else np.broadcast_to(z_ref, Z.shape)
            res["beta"] = max(res["beta"], float(np.max(np.abs(Z - ref))))
    return res


def simulate_report(contracts: Sequence[ContractTriple], spec: DriftCostSpec,
                    params: ModelParams, config: SimConfig, z_ref=None,
                    payoffs: Sequence[Payoff] | None = None) -> SimReport:
    """Agent utility and Principal payoffs under the Agent's best response."""
    cfg = config
    if not config.keep_paths:
        n_steps, _ = config.steps(params.horizon)
        cfg = SimConfig(**{**config.__dict__, "keep_paths": True,
                           "record_stride": max(1, n_steps // 10)})
    paths = simulate_paths(params, spec, response_policy(contracts, spec), cfg, contracts)
    pay = principal_payoff_samples(paths, params, payoffs)
    y0 = sum(c.y for c in contracts)
    predicted = -math.exp(-params.risk_aversion * y0)
    residuals = equilibrium_residuals(contracts, spec, params, paths, params.r0, z_ref)
    return SimReport(
        agent_utility=agent_utility(paths, params),
        predicted_agent_utility=predicted,
        principal_payoffs=[mean_and_se(pay[:, i], paths.antithetic) for i in range(pay.shape[1])],
        equilibrium_residuals=residuals,
        notes=[LOCAL_CERTIFICATION_NOTE],
        settings={"n_paths": config.n_paths, "dt": paths.dt, "seed": config.seed,
                  "antithetic": config.antithetic},
    )

"""Finite-difference solver for risk-neutral Principals.

The construction follows the aggregated-equation route: solve the semilinear
PDE for the sum ``V`` of the Principals' values, then ``N`` heat equations
with the shared source ``H(., grad V) / N``, and finally rebuild the
equilibrium sensitivities from the gradients.

Space is discretized with second-order central differences on a uniform box;
time with explicit Euler (default) or a semi-implicit step that treats the
diffusion implicitly and the Hamiltonian explicitly.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .errors import ConfigError, NoConvergence, SingularMBeta, Unstable
from .kernels import StencilPlan
from .model import DriftCostSpec, ModelParams, Payoff, generator_G, generator_gradient, principal_payoffs

DET_THRESHOLD = 1e-12
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 100
BLOWUP = 1e12


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform space-time grid on ``[lo, hi]^N x [0, T]``."""

    horizon: float
    lo: np.ndarray
    hi: np.ndarray
    n_x: int
    n_t: int
    scheme: str = "explicit"

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).reshape(-1)
        hi = np.array(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ConfigError("need lo < hi on every axis", "grid")
        if self.n_x < 5:
            raise ConfigError("need at least 5 points per axis", "grid.n_x")
        if self.n_t < 1:
            raise ConfigError("need at least one time step", "grid.n_t")
        if self.scheme not in ("explicit", "semi-implicit"):
            raise ConfigError(f"unknown scheme {self.scheme!r}", "grid.scheme")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def build(cls, params: ModelParams, lo, hi, n_x: int, n_t: int | None = None,
              scheme: str = "explicit", check_margin: bool = True) -> "Grid":
        """Grid for ``params``; ``n_t`` defaults to the smallest stable explicit step count."""
        n = params.n_principals
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,))
        lam = float(np.max(np.linalg.eigvalsh(params.cov)))
        h = float(np.min((hi - lo) / (n_x - 1)))
        dt_max = h * h / (2.0 * n * lam)
        if n_t is None:
            n_t = max(1, math.ceil(params.horizon / dt_max - 1e-9))
        grid = cls(params.horizon, lo, hi, int(n_x), int(n_t), scheme)
        if scheme == "explicit" and grid.dt > dt_max * (1 + 1e-12):
            raise ConfigError(f"explicit step dt={grid.dt:.3g} exceeds stability bound {dt_max:.3g}",
                              "grid.n_t")
        if check_margin:
            margin = 3.0 * math.sqrt(params.horizon * lam)
            gap = min(np.min(params.x0 - lo), np.min(hi - params.x0))
            if gap < margin * (1 - 1e-12):
                raise ConfigError(f"x0 is within {gap:.3g} of the boundary; need {margin:.3g}",
                                  "grid")
        return grid

    @property
    def ndim(self) -> int:
        return self.lo.size

    @property
    def h(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.n_x - 1)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_t

    @property
    def shape(self) -> tuple:
        return (self.n_x,) * self.ndim

    @property
    def axes(self) -> list:
        return [np.linspace(self.lo[a], self.hi[a], self.n_x) for a in range(self.ndim)]

    @property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (N,)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_t + 1)

    def interior_mask(self, width: int = 1) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[tuple(slice(width, self.n_x - width) for _ in range(self.ndim))] = True
        return mask


# Pointwise maps ----------------------------------------------------------------


def _lq_phi_matrix(spec, params: ModelParams) -> np.ndarray:
    n = params.n_principals
    return n * params.risk_aversion * np.diag(1.0 / spec.k**2) @ params.cov


def _phi_generic(t, x, beta_bar, spec, params, nu):
    jac = np.diag(spec.drift_jacobian(t, x, nu)) @ spec.response_jacobian(t, x, beta_bar, nu)
    det = np.linalg.det(jac)
    if not abs(det) > DET_THRESHOLD:
        raise SingularMBeta(f"M_beta is singular at beta_bar={beta_bar.tolist()} (det={det:.3e})")
    b = spec.drift(t, x, nu)
    grad_g = params.risk_aversion * params.cov @ beta_bar - b
    return params.n_principals * np.linalg.solve(jac.T, grad_g + b)


def phi(t, x, beta_bar, spec: DriftCostSpec, params: ModelParams, closed_form: bool = True):
    """``Phi = N * M^{-T} (grad G + b(nu*))`` with ``M = db/dnu . dnu*/dz``.

    For the LQ model this is the linear map ``N R_A K^-2 Sigma Sigma^T``.
    Broadcasts over leading axes of ``beta_bar`` in the LQ closed form.
    """
    beta_bar = np.asarray(beta_bar, dtype=float)
    if spec.is_lq and closed_form:
        return beta_bar @ _lq_phi_matrix(spec, params).T
    nu = spec.best_response(t, x, beta_bar)
    return _phi_generic(t, x, beta_bar, spec, params, nu)


def _phi_inverse_matrix(spec, params: ModelParams) -> np.ndarray:
    n = params.n_principals
    a = np.eye(n) + _lq_phi_matrix(spec, params)
    if abs(np.linalg.det(a)) < DET_THRESHOLD:
        raise SingularMBeta("Id + Phi is singular")
    return np.linalg.inv(a)


def _newton(residual, start, tol, max_iter, z):
    """Damped Newton on ``residual(beta, hint) -> (r, nu)`` with a central-difference Jacobian."""
    beta = start
    res, nu = residual(beta, None)
    norm = float(np.max(np.abs(res)))
    n = beta.size
    for _ in range(max_iter):
        if norm <= tol:
            return beta, nu, norm
        jac = np.empty((n, n))
        for j in range(n):
            step = 1e-6 * max(1.0, abs(beta[j]))
            e = np.zeros(n)
            e[j] = step
            try:
                jac[:, j] = (residual(beta + e, nu)[0] - residual(beta - e, nu)[0]) / (2 * step)
            except SingularMBeta as exc:
                raise NoConvergence(f"Jacobian of Id + Phi unavailable: {exc}", norm) from exc
        try:
            direction = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence("singular Newton system", norm) from exc
        damping = 1.0
        for _ in range(40):
            trial = beta + damping * direction
            try:
                trial_res, trial_nu = residual(trial, nu)
            except SingularMBeta:
                damping *= 0.5
                continue
            trial_norm = float(np.max(np.abs(trial_res)))
            if trial_norm < norm or trial_norm <= tol:
                beta, res, nu, norm = trial, trial_res, trial_nu, trial_norm
                break
            damping *= 0.5
        else:
            raise NoConvergence(f"line search stalled at z={z.tolist()}", norm)
    return beta, nu, norm


def phi_inverse(t, x, z, spec: DriftCostSpec, params: ModelParams, closed_form: bool = True,
                tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER, init=None,
                return_effort: bool = False):
    """Solve ``beta + Phi(beta) = z`` for ``beta`` (the map written ``varphi``).

    Generic specs use damped Newton from ``init`` (default ``beta = z``) with a
    finite-difference Jacobian of ``Id + Phi``. Inner iterations refine the
    Agent's response locally; the converged point is re-checked with the
    global maximizer, which also enforces uniqueness of the response.
    """
    z = np.asarray(z, dtype=float)
    if spec.is_lq and closed_form:
        beta = z @ _phi_inverse_matrix(spec, params).T
        if return_effort:
            return beta, spec.best_response(t, x, beta)
        return beta

    def residual(beta, hint):
        nu = spec.best_response(t, x, beta) if hint is None else spec.local_response(t, x, beta, hint)
        return beta + _phi_generic(t, x, beta, spec, params, nu) - z, nu

    start = z.copy() if init is None else np.array(init, dtype=float)
    try:
        beta, nu, norm = _newton(residual, start, tol, max_iter, z)
    except SingularMBeta as exc:
        if init is None:
            raise NoConvergence(f"Id + Phi cannot be evaluated at the initial point: {exc}") from exc
        return phi_inverse(t, x, z, spec, params, closed_form, tol, max_iter, None, return_effort)
    if norm > tol:
        raise NoConvergence(f"Newton did not converge at z={z.tolist()} (residual {norm:.3e})", norm)
    res, nu_global = residual(beta, None)
    if float(np.max(np.abs(res))) > tol:
        beta, nu_global, norm = _newton(residual, beta, tol, max_iter, z)
        if norm > tol:
            raise NoConvergence(f"Newton did not converge at z={z.tolist()} (residual {norm:.3e})",
                                norm)
    return (beta, nu_global) if return_effort else beta


def _hamiltonian_from(t, x, z, beta, nu, spec, params):
    b = spec.drift(t, x, nu)
    sb = beta @ params.sigma
    g = 0.5 * params.risk_aversion * np.sum(sb * sb, axis=-1) - (
        np.sum(b * beta, axis=-1) - spec.cost(t, x, nu))
    return np.sum((z - beta) * b, axis=-1) - g


def hamiltonian_H(t, x, z, spec: DriftCostSpec, params: ModelParams, closed_form: bool = True):
    """``H(z) = (z - varphi(z)) . b(nu*(varphi(z))) - G(varphi(z))``."""
    z = np.asarray(z, dtype=float)
    beta = phi_inverse(t, x, z, spec, params, closed_form=closed_form)
    nu = spec.best_response(t, x, beta)
    b = spec.drift(t, x, nu)
    return np.sum((z - beta) * b, axis=-1) - generator_G(t, x, beta, params, spec)


def _hamiltonian_batch(t, points, z, spec, params, guess=None):
    """``H`` at many nodes; ``points`` and ``z`` have shape ``(m, N)``.

    For generic specs ``guess`` holds the previous ``varphi`` per node and is
    updated in place.
    """
    if spec.is_lq:
        return hamiltonian_H(t, points, z, spec, params)
    out = np.empty(z.shape[0])
    for i in range(z.shape[0]):
        init = None if guess is None else guess[i]
        beta, nu = phi_inverse(t, points[i], z[i], spec, params, init=init, return_effort=True)
        if guess is not None:
            guess[i] = beta
        out[i] = _hamiltonian_from(t, points[i], z[i], beta, nu, spec, params)
    return out


def _phi_batch(t, points, beta, spec, params):
    if spec.is_lq:
        return phi(t, points, beta, spec, params)
    return np.array([phi(t, points[i], beta[i], spec, params) for i in range(beta.shape[0])])


def _phi_inverse_batch(t, points, z, spec, params, guess=None):
    if spec.is_lq:
        return phi_inverse(t, points, z, spec, params)
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        out[i] = phi_inverse(t, points[i], z[i], spec, params,
                             init=None if guess is None else guess[i])
    return out


# Time stepping -----------------------------------------------------------------


def extrapolate_boundary(u: np.ndarray, order: int = 1) -> None:
    """Fill boundary layers in place, axis by axis.

    ``order=1`` sets the second normal difference to zero (exact for affine
    data); ``order=2`` sets the third to zero (exact for quadratics).
    """
    for axis in range(u.ndim):
        a = np.moveaxis(u, axis, 0)
        if order == 1:
            a[0] = 2.0 * a[1] - a[2]
            a[-1] = 2.0 * a[-2] - a[-3]
        else:
            a[0] = 3.0 * a[1] - 3.0 * a[2] + a[3]
            a[-1] = 3.0 * a[-2] - 3.0 * a[-3] + a[-4]


def _boundary_order(boundary: str) -> int:
    if boundary == "linear":
        return 1
    if boundary == "quadratic":
        return 2
    raise ConfigError(f"unknown boundary rule {boundary!r}", "boundary")


class _ImplicitDiffusion:
    """LU-factored ``I - dt * D`` with extrapolation rows on the boundary."""

    def __init__(self, grid: Grid, cov: np.ndarray, order: int):
        shape = grid.shape
        nd = grid.ndim
        size = int(np.prod(shape))
        idx = np.arange(size).reshape(shape)
        strides = [s // 8 for s in np.ones(shape).strides]
        h = grid.h
        dt = grid.dt
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(v)

        coords = np.indices(shape).reshape(nd, -1).T
        for p, c in zip(range(size), coords):
            at_lo = c == 0
            at_hi = c == grid.n_x - 1
            on_boundary = at_lo | at_hi
            if on_boundary.any():
                axis = int(np.nonzero(on_boundary)[0][-1])
                s = strides[axis] if at_lo[axis] else -strides[axis]
                coeffs = (1.0, -2.0, 1.0) if order == 1 else (1.0, -3.0, 3.0, -1.0)
                for k, v in enumerate(coeffs):
                    add(p, p + k * s, v)
                continue
            add(p, p, 1.0)
            for a in range(nd):
                sa = strides[a]
                w = 0.5 * cov[a, a] / (h[a] * h[a])
                add(p, p + sa, -dt * w)
                add(p, p - sa, -dt * w)
                add(p, p, 2.0 * dt * w)
                for b in range(a + 1, nd):
                    sb = strides[b]
                    w = cov[a, b] / (4.0 * h[a] * h[b])
                    add(p, p + sa + sb, -dt * w)
                    add(p, p + sa - sb, dt * w)
                    add(p, p - sa + sb, dt * w)
                    add(p, p - sa - sb, -dt * w)
        mat = sparse.csc_matrix((vals, (rows, cols)), shape=(size, size))
        self.lu = splinalg.splu(mat)
        self.boundary = ~grid.interior_mask().reshape(-1)
        self.shape = shape

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        r = rhs.reshape(-1).copy()
        r[self.boundary] = 0.0
        return self.lu.solve(r).reshape(self.shape)


class _Stepper:
    def __init__(self, grid: Grid, params: ModelParams, boundary: str):
        self.grid = grid
        self.order = _boundary_order(boundary)
        self.plan = StencilPlan(grid.shape, grid.h, params.cov)
        self.interior = self.plan.interior
        self.implicit = (_ImplicitDiffusion(grid, params.cov, self.order)
                         if grid.scheme == "semi-implicit" else None)

    def step(self, u: np.ndarray, source_interior: np.ndarray, diff: np.ndarray | None = None):
        """One backward step ``u(t_n)`` from ``u(t_{n+1})`` with a given interior source."""
        dt = self.grid.dt
        if self.implicit is None:
            if diff is None:
                diff, _ = self.plan.apply(u)
            new = u.copy()
            flat = new.reshape(-1)
            flat[self.interior] += dt * (diff.reshape(-1)[self.interior] + source_interior)
            extrapolate_boundary(new, self.order)
            return new
        rhs = u.copy().reshape(-1)
        rhs[self.interior] += dt * source_interior
        return self.implicit.solve(rhs)


def _check_finite(u, what, t):
    if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > BLOWUP:
        raise Unstable(f"{what} blew up at t={t:.6g}")


def _snapshot_steps(n_t: int, n_snapshots: int) -> np.ndarray:
    n_snapshots = max(2, min(n_snapshots, n_t + 1))
    return np.unique(np.round(np.linspace(0, n_t, n_snapshots)).astype(int))


@dataclass(eq=False)
class AggregatedSolution:
    grid: Grid
    steps: np.ndarray
    V: np.ndarray
    source: np.ndarray | None
    residual: float
    boundary: str


def solve_aggregated(grid: Grid, spec: DriftCostSpec, params: ModelParams, terminal: Payoff,
                     n_snapshots: int = 11, boundary: str = "linear",
                     keep_source: bool = True) -> AggregatedSolution:
    """Backward solve of ``V_t + Tr(Sigma Sigma^T D^2 V)/2 + H(., grad V) = 0``, ``V(T) = L``.

    The interior source ``H(t_{n+1}, x, grad V^{n+1})`` of every step is cached
    for the component solves. ``residual`` is the largest interior value of
    ``(V^n - V^{n+1})/dt - (diffusion + H)(V^n)`` over the snapshot steps.
    """
    stepper = _Stepper(grid, params, boundary)
    pts = grid.points.reshape(-1, grid.ndim)[stepper.interior]
    times = grid.times
    steps = _snapshot_steps(grid.n_t, n_snapshots)
    V = np.asarray(terminal.value(grid.points), dtype=float)
    snaps = {grid.n_t: V.copy()}
    source = np.empty((grid.n_t, stepper.interior.size)) if keep_source else None
    residual = 0.0
    guess = None if spec.is_lq else [None] * pts.shape[0]

    def operator(u, n):
        diff, grad = stepper.plan.apply(u)
        z = grad.reshape(grid.ndim, -1)[:, stepper.interior].T
        if n == grid.n_t and terminal.affine:
            z = terminal.gradient(pts)
        return diff, _hamiltonian_batch(times[n], pts, z, spec, params, guess)

    diff, H = operator(V, grid.n_t)
    for n in range(grid.n_t - 1, -1, -1):
        if keep_source:
            source[n] = H
        new = stepper.step(V, H, diff)
        _check_finite(new, "V", times[n])
        diff, H = operator(new, n)
        if n in steps:
            snaps[n] = new.copy()
            rate = (new - V).reshape(-1)[stepper.interior] / grid.dt
            op = diff.reshape(-1)[stepper.interior] + H
            residual = max(residual, float(np.max(np.abs(rate - op))))
        V = new
    return AggregatedSolution(grid, steps, np.stack([snaps[s] for s in steps]), source, residual,
                              boundary)


def solve_components(grid: Grid, spec: DriftCostSpec, params: ModelParams,
                     aggregated: AggregatedSolution, terminals: Sequence[Payoff],
                     threads: int = 1) -> np.ndarray:
    """Heat equations ``u_t + Tr(Sigma Sigma^T D^2 u)/2 + H(., grad V)/N = 0``, ``u(T) = l_i``.

    Returns an array of shape ``(N, n_snapshots) + grid.shape``.
    """
    if aggregated.source is None:
        raise ValueError("aggregated solution was computed without keeping its source")
    n = len(terminals)
    stepper = _Stepper(grid, params, aggregated.boundary)
    steps = set(int(s) for s in aggregated.steps)

    def run(payoff):
        u = np.asarray(payoff.value(grid.points), dtype=float)
        snaps = {grid.n_t: u.copy()}
        for k in range(grid.n_t - 1, -1, -1):
            u = stepper.step(u, aggregated.source[k] / n)
            if k in steps:
                _check_finite(u, "u_tilde", grid.times[k])
                snaps[k] = u.copy()
        return np.stack([snaps[s] for s in aggregated.steps])

    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(run, terminals))
    else:
        out = [run(p) for p in terminals]
    return np.stack(out)


def _gradient(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Central differences inside, second-order one-sided on the boundary."""
    g = np.gradient(u, *grid.h, edge_order=2)
    if grid.ndim == 1:
        g = [g]
    return np.stack(g)


@dataclass(eq=False)
class GridSolution:
    """Snapshots of every field; leading axes index principal and/or snapshot."""

    grid: Grid
    times: np.ndarray
    V: np.ndarray
    u_tilde: np.ndarray
    grad_V: np.ndarray
    beta_bar: np.ndarray
    beta_i: np.ndarray
    residuals: dict
    meta: dict = field(default_factory=dict)

    @property
    def n_principals(self) -> int:
        return self.u_tilde.shape[0]

    def columns(self) -> list:
        n = self.grid.ndim
        cols = ["t"] + [f"x{a + 1}" for a in range(n)] + ["V"]
        cols += [f"u_tilde_{i + 1}" for i in range(self.n_principals)]
        cols += [f"beta_bar_{a + 1}" for a in range(n)]
        cols += [f"beta_{i + 1}_{a + 1}" for i in range(self.n_principals) for a in range(n)]
        return cols

    def rows(self):
        """One row per (snapshot, node), in :meth:`columns` order."""
        pts = self.grid.points.reshape(-1, self.grid.ndim)
        n = self.grid.ndim
        for s, t in enumerate(self.times):
            block = [np.full(pts.shape[0], t), *pts.T, self.V[s].reshape(-1)]
            block += [self.u_tilde[i, s].reshape(-1) for i in range(self.n_principals)]
            block += [self.beta_bar[s, a].reshape(-1) for a in range(n)]
            block += [self.beta_i[i, s, a].reshape(-1) for i in range(self.n_principals)
                      for a in range(n)]
            yield from np.stack(block, axis=1)


def construct_betas(grid: Grid, V: np.ndarray, u_tilde: np.ndarray, spec: DriftCostSpec,
                    params: ModelParams, times: np.ndarray, terminal: Payoff | None = None):
    """``beta_bar = varphi(grad V)`` and ``beta_i = grad u_i - Phi(beta_bar)/N`` at each snapshot.

    Returns ``(grad_V, beta_bar, beta_i, residuals)``.
    """
    n = u_tilde.shape[0]
    nd = grid.ndim
    pts = grid.points.reshape(-1, nd)
    inner = grid.interior_mask().reshape(-1)
    grad_V, beta_bar, beta_i = [], [], []
    guess = None
    foc = 0.0
    sum_gap = 0.0
    for s, t in enumerate(times):
        gV = _gradient(V[s], grid)
        if terminal is not None and terminal.affine and t == grid.horizon:
            gV = np.moveaxis(terminal.gradient(grid.points), -1, 0)
        z = gV.reshape(nd, -1).T
        bb = _phi_inverse_batch(t, pts, z, spec, params, guess)
        guess = None if spec.is_lq else bb
        phi_bb = _phi_batch(t, pts, bb, spec, params)
        layer = []
        for i in range(n):
            gu = _gradient(u_tilde[i, s], grid).reshape(nd, -1).T
            bi = gu - phi_bb / n
            foc = max(foc, float(np.max(np.abs(bi - gu + phi_bb / n))))
            layer.append(bi)
        total = np.sum(layer, axis=0)
        sum_gap = max(sum_gap, float(np.max(np.abs(total - bb)[inner])))
        grad_V.append(gV)
        beta_bar.append(bb.T.reshape((nd,) + grid.shape))
        beta_i.append([b.T.reshape((nd,) + grid.shape) for b in layer])
    beta_i = np.moveaxis(np.array(beta_i), 1, 0)
    residuals = {"foc": foc, "beta_sum": sum_gap}
    return np.stack(grad_V), np.stack(beta_bar), beta_i, residuals


def solve(params: ModelParams, spec: DriftCostSpec, grid: Grid,
          terminals: Sequence[Payoff] | None = None, n_snapshots: int = 11,
          boundary: str = "linear", threads: int = 1) -> GridSolution:
    """Full pipeline: aggregated equation, component heat equations, sensitivities."""
    if terminals is None:
        terminals = principal_payoffs(params)
    if len(terminals) != params.n_principals:
        raise ConfigError("one terminal payoff per Principal required", "terminals")
    total = terminals[0]
    for p in terminals[1:]:
        total = total + p
    agg = solve_aggregated(grid, spec, params, total, n_snapshots, boundary)
    u = solve_components(grid, spec, params, agg, terminals, threads)
    times = grid.times[agg.steps]
    grad_V, beta_bar, beta_i, res = construct_betas(grid, agg.V, u, spec, params, times, total)
    decomposition = float(np.max(np.abs(u.sum(axis=0) - agg.V)))
    residuals = {"aggregated_pde": agg.residual, "decomposition": decomposition, **res}
    meta = {
        "scheme": grid.scheme,
        "boundary": boundary,
        "uniqueness": "not established; the aggregated equation may admit several solutions",
        "h": grid.h.tolist(),
        "dt": grid.dt,
    }
    return GridSolution(grid, times, agg.V, u, grad_V, beta_bar, beta_i, residuals, meta)


def closed_form_errors(gs: GridSolution, lq_params) -> dict:
    """Max interior deviation of every field from the LQ closed forms (all snapshots)."""
    from . import lq

    sol = lq.solve(lq_params)
    grid = gs.grid
    pts = grid.points
    inner = grid.interior_mask()
    err = {"V": 0.0, "u_tilde_1": 0.0, "u_tilde_2": 0.0, "beta_bar": 0.0, "beta_1": 0.0,
           "beta_2": 0.0}
    w1 = np.array([1.0 + lq_params.gamma1, -lq_params.gamma1])
    w2 = np.array([-lq_params.gamma2, 1.0 + lq_params.gamma2])
    for s, t in enumerate(gs.times):
        tau = lq_params.horizon - t
        V = pts @ sol.Gamma + sol.lam * tau
        err["V"] = max(err["V"], float(np.max(np.abs(gs.V[s] - V)[inner])))
        for i, w in enumerate((w1, w2)):
            u = pts @ w + sol.lambda_tilde * tau
            err[f"u_tilde_{i + 1}"] = max(err[f"u_tilde_{i + 1}"],
                                          float(np.max(np.abs(gs.u_tilde[i, s] - u)[inner])))
        bb = np.moveaxis(gs.beta_bar[s], 0, -1)
        err["beta_bar"] = max(err["beta_bar"], float(np.max(np.abs(bb - sol.beta_bar)[inner])))
        for i, b in enumerate((sol.beta1, sol.beta2)):
            bi = np.moveaxis(gs.beta_i[i, s], 0, -1)
            err[f"beta_{i + 1}"] = max(err[f"beta_{i + 1}"], float(np.max(np.abs(bi - b)[inner])))
    return err


# Quadratic-terminal reference ----------------------------------------------------


def hamiltonian_matrix(spec, params: ModelParams) -> np.ndarray:
    """Symmetric ``A`` with ``H(z) = z^T A z`` for the linear-quadratic model."""
    if not spec.is_lq:
        raise ValueError("H is a quadratic form only for the linear-quadratic spec")
    m = _phi_inverse_matrix(spec, params)
    k2 = np.diag(spec.k**2)
    cov = params.cov
    a = (np.eye(m.shape[0]) - m).T @ k2 @ m - 0.5 * params.risk_aversion * m.T @ cov @ m \
        + 0.5 * m.T @ k2 @ m
    return 0.5 * (a + a.T)


@dataclass(frozen=True, eq=False)
class QuadraticReference:
    """Exact solution when ``H(z) = z^T A z`` and every terminal payoff is quadratic.

    ``V = x^T P x / 2 + q . x + r`` and ``u_i = x^T P_i x / 2 + q_i . x + r_i``
    with ``P = (I - 2 tau Q A)^-1 Q``, ``q = (I - 2 tau Q A)^-1 w``,
    ``P_i = Q_i + (P - Q)/N``, ``q_i = w_i + (q - w)/N``, ``tau = T - t``.
    The constants are integrated by adaptive quadrature.
    """

    A: np.ndarray
    cov: np.ndarray
    horizon: float
    terminals: tuple

    def _pq(self, tau):
        q_tot = sum(p.curvature for p in self.terminals)
        w_tot = sum(p.weights for p in self.terminals)
        b = np.eye(self.A.shape[0]) - 2.0 * tau * q_tot @ self.A
        return np.linalg.solve(b, q_tot), np.linalg.solve(b, w_tot), q_tot, w_tot

    def _constant(self, tau, i=None):
        from scipy.integrate import quad

        n = len(self.terminals)

        def rate(s):
            P, q, Q, _ = self._pq(s)
            if i is not None:
                P = self.terminals[i].curvature + (P - Q) / n
            return 0.5 * float(np.trace(self.cov @ P)) + float(q @ self.A @ q) / (1 if i is None else n)

        return quad(rate, 0.0, tau, epsabs=1e-14, epsrel=1e-13)[0]

    def value(self, t, x):
        tau = self.horizon - t
        P, q, _, _ = self._pq(tau)
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, P, x) + x @ q + self._constant(tau) \
            + sum(p.offset for p in self.terminals)

    def component(self, i, t, x):
        tau = self.horizon - t
        n = len(self.terminals)
        P, q, Q, w = self._pq(tau)
        term = self.terminals[i]
        Pi = term.curvature + (P - Q) / n
        qi = term.weights + (q - w) / n
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, Pi, x) + x @ qi \
            + self._constant(tau, i) + term.offset

    def gradient(self, t, x):
        P, q, _, _ = self._pq(self.horizon - t)
        return np.asarray(x, dtype=float) @ P.T + q

    def component_gradient(self, i, t, x):
        n = len(self.terminals)
        P, q, Q, w = self._pq(self.horizon - t)
        term = self.terminals[i]
        Pi = term.curvature + (P - Q) / n
        return np.asarray(x, dtype=float) @ Pi.T + term.weights + (q - w) / n


def quadratic_reference(spec, params: ModelParams, terminals: Sequence[Payoff]) -> QuadraticReference:
    """Exact LQ solution for quadratic terminal payoffs, used for refinement studies."""
    terms = []
    for p in terminals:
        n = params.n_principals
        curv = np.zeros((n, n)) if p.curvature is None else np.asarray(p.curvature, dtype=float)
        terms.append(Payoff(p.weights, curv, p.offset))
    return QuadraticReference(hamiltonian_matrix(spec, params), params.cov, params.horizon,
                              tuple(terms))


def reference_errors(gs: GridSolution, ref: QuadraticReference, spec, params: ModelParams) -> dict:
    """Max interior deviation of every field from a quadratic reference (all snapshots)."""
    pts = gs.grid.points
    inner = gs.grid.interior_mask()
    n = gs.n_principals
    err = {"V": 0.0, "beta_bar": 0.0}
    for i in range(n):
        err[f"u_tilde_{i + 1}"] = 0.0
        err[f"beta_{i + 1}"] = 0.0

    def gap(a, b):
        return float(np.max(np.abs(a - b)[inner]))

    for s, t in enumerate(gs.times):
        err["V"] = max(err["V"], gap(gs.V[s], ref.value(t, pts)))
        bb = phi_inverse(t, pts, ref.gradient(t, pts), spec, params)
        err["beta_bar"] = max(err["beta_bar"], gap(np.moveaxis(gs.beta_bar[s], 0, -1), bb))
        shift = phi(t, pts, bb, spec, params) / n
        for i in range(n):
            err[f"u_tilde_{i + 1}"] = max(err[f"u_tilde_{i + 1}"],
                                          gap(gs.u_tilde[i, s], ref.component(i, t, pts)))
            bi = ref.component_gradient(i, t, pts) - shift
            err[f"beta_{i + 1}"] = max(err[f"beta_{i + 1}"],
                                       gap(np.moveaxis(gs.beta_i[i, s], 0, -1), bi))
    return err

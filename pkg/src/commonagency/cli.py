"""Command-line front end.

Exit codes: 0 success, 2 invalid configuration, 3 solver or verification
failure. Every run writes ``resolved_config.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import hjb, io, lq, sim
from .errors import CommonAgencyError, ConfigError, NashViolation
from .model import LinearQuadratic, Payoff, polynomial_spec, principal_payoffs


def _prefixed(exc: ConfigError, section: str) -> ConfigError:
    key = exc.key or ""
    if key and not key.startswith(section + "."):
        key = f"{section}.{key}"
    msg = str(exc).split(": ", 1)[-1] if exc.key else str(exc)
    return ConfigError(msg, key or section)


def lq_params(cfg: cfgmod.RunConfig) -> lq.LQParams:
    m = cfg.model
    try:
        return lq.LQParams(
            k1=m.k1, k2=m.k2, rho=m.rho, gamma1=m.gamma1, gamma2=m.gamma2,
            risk_aversion=m.risk_aversion, reservation_utility=m.reservation_utility,
            horizon=m.horizon, x0=tuple(float(v) for v in m.x0),
            sigma=None if m.sigma is None else np.array(m.sigma, dtype=float),
            y_shares=tuple(m.y_shares), alpha_shares=tuple(m.alpha_shares),
        )
    except ConfigError as exc:
        raise _prefixed(exc, "model") from exc


def build_model(cfg: cfgmod.RunConfig):
    p = lq_params(cfg)
    try:
        params = p.model_params()
    except ConfigError as exc:
        raise _prefixed(exc, "model") from exc
    if cfg.model.spec == "lq":
        spec = LinearQuadratic((p.k1, p.k2))
    else:
        try:
            spec = polynomial_spec((p.k1, p.k2), cfg.model.quartic, cfg.model.effort_bound)
        except ConfigError as exc:
            raise _prefixed(exc, "model") from exc
    return p, params, spec


def _write_echo(out: Path, command: str, cfg: cfgmod.RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **cfg.to_dict()}
    with open(out / "resolved_config.json", "w", newline="\n", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _sim_config(cfg: cfgmod.RunConfig, **extra) -> sim.SimConfig:
    s = cfg.simulation
    return sim.SimConfig(n_paths=s.n_paths, dt=s.dt, seed=cfg.seed, antithetic=s.antithetic,
                         block_size=s.block_size, threads=cfg.threads, budget=s.budget, **extra)


# lq ------------------------------------------------------------------------------


def cmd_lq(cfg: cfgmod.RunConfig, out: Path) -> dict:
    p = lq_params(cfg)
    sol = lq.solve(p)
    record = sol.record()
    fmt = cfg.output.format
    fb = sol.nu_first_best
    benchmarks = [
        {"regime": "competitive", "nu1": sol.nu_star[0], "nu2": sol.nu_star[1],
         "delta": sol.delta, "gap_to_first_best": float(np.linalg.norm(sol.nu_star - fb))},
        {"regime": "aggregated", "nu1": sol.nu_aggregated[0], "nu2": sol.nu_aggregated[1],
         "delta": sol.delta_a, "gap_to_first_best": float(np.linalg.norm(sol.nu_aggregated - fb))},
        {"regime": "first_best", "nu1": fb[0], "nu2": fb[1], "delta": 0.5 * float(fb @ fb),
         "gap_to_first_best": 0.0},
    ]
    gap = float(np.linalg.norm(sol.nu_star - sol.nu_aggregated))
    diag = {
        "competitive_vs_aggregated_gap": gap,
        "coincides_with_first_best": bool(gap == 0.0 and np.array_equal(sol.nu_star, fb)),
        "hjb_residual_max": max(lq.hjb_residuals(sol, p).values()),
        "decomposition_gap": abs(2.0 * sol.lambda_tilde - sol.lam),
        "proportion_gap_matrix": _safe(lambda: lq.proportion_gap_matrix(p)),
        "proportion_gap_closed_form": _safe(lambda: lq.proportion_gap(p.rho, p))
        if p.k1 == p.k2 and p.sigma is None else None,
        "printed_nu1": None, "printed_nu2": None, "printed_discrepancy": None,
        "works_more_for_1": bool(sol.nu_star[0] > sol.nu_star[1]),
        "dominance_threshold": None,
        "reservation_wage_r0": sol.r0,
    }
    if p.sigma is None and abs(p.rho) < 1:
        ce = lq.effort_components_correlated(p)
        diag["printed_nu1"], diag["printed_nu2"] = (float(v) for v in ce.printed_route)
        diag["printed_discrepancy"] = ce.discrepancy
    if p.risk_aversion == 0 and np.allclose(p.sigma_matrix, np.eye(2)):
        diag["works_more_for_1"], diag["dominance_threshold"] = lq.dominance_condition(p)
    cols = ["regime", "nu1", "nu2", "delta", "gap_to_first_best"]
    if fmt == "json":
        files = [io.write_json(out / "lq.json", "lq", {"record": record, "benchmarks": benchmarks,
                                                         "diagnostics": diag})]
    else:
        files = [io.write_record(out, "lq", fmt, record),
                 io.write_table(out, "lq_benchmarks", fmt, cols, benchmarks),
                 io.write_record(out, "lq_diagnostics", fmt, diag)]
    return {"record": record, "benchmarks": benchmarks, "diagnostics": diag, "files": files}


def _safe(fn):
    try:
        return fn()
    except CommonAgencyError:
        return None


# hjb -----------------------------------------------------------------------------


def _terminals(cfg, params):
    curv = (cfg.grid.curvature1, cfg.grid.curvature2)
    if all(c is None for c in curv):
        return principal_payoffs(params), False
    out = []
    for w, c in zip(params.payoff_weights, curv):
        out.append(Payoff(w, np.zeros((2, 2)) if c is None else np.array(c, dtype=float)))
    return out, True


def _hjb_errors(gs, p, params, spec, terminals, curved):
    if not spec.is_lq:
        return {}
    if curved:
        ref = hjb.quadratic_reference(spec, params, terminals)
        return hjb.reference_errors(gs, ref, spec, params)
    return hjb.closed_form_errors(gs, p)


def cmd_hjb(cfg: cfgmod.RunConfig, out: Path) -> dict:
    p, params, spec = build_model(cfg)
    g = cfg.grid
    terminals, curved = _terminals(cfg, params)
    fmt = cfg.output.format
    levels = []
    first = None
    for level in range(g.refine + 1):
        n_x = (g.n_x - 1) * 2**level + 1
        n_t = None if g.n_t == 0 else g.n_t * 4**level
        grid = hjb.Grid.build(params, g.lo, g.hi, n_x, n_t, g.scheme)
        gs = hjb.solve(params, spec, grid, terminals, g.snapshots, g.boundary, cfg.threads)
        errors = _hjb_errors(gs, p, params, spec, terminals, curved)
        levels.append({"level": level, "h": float(grid.h[0]), "n_x": n_x, "n_t": grid.n_t,
                       **{f"err_{k}": v for k, v in errors.items()}})
        if first is None:
            first = (gs, errors)
    for prev, cur in zip(levels, levels[1:]):
        for key in list(cur):
            if key.startswith("err_"):
                a, b = prev[key], cur[key]
                cur["order_" + key[4:]] = math.log2(a / b) if a > 0 and b > 0 else None
    gs, errors = first
    summary = {
        "scheme": gs.meta["scheme"], "boundary": gs.meta["boundary"], "h": gs.meta["h"][0],
        "dt": gs.meta["dt"], "n_x": gs.grid.n_x, "n_t": gs.grid.n_t,
        "uniqueness": gs.meta["uniqueness"],
        **{f"residual_{k}": v for k, v in gs.residuals.items()},
        **{f"err_{k}": v for k, v in errors.items()},
    }
    ix = tuple(int(np.argmin(np.abs(ax - x))) for ax, x in zip(gs.grid.axes, params.x0))
    summary["V_at_x0"] = float(gs.V[0][ix])
    for i in range(gs.n_principals):
        summary[f"u_tilde_{i + 1}_at_x0"] = float(gs.u_tilde[i, 0][ix])
    files = []
    if g.export:
        files.append(io.write_table(out, "hjb_grid", fmt, gs.columns(), gs.rows()))
    files.append(io.write_record(out, "hjb_summary", fmt, summary))
    if g.refine > 0:
        cols = sorted({k for row in levels for k in row},
                      key=lambda k: (0 if k in ("level", "h", "n_x", "n_t") else 1, k))
        cols = ["level", "h", "n_x", "n_t"] + [c for c in cols if c not in ("level", "h", "n_x", "n_t")]
        files.append(io.write_table(out, "hjb_refinement", fmt, cols, levels))
    return {"summary": summary, "levels": levels, "solution": gs, "files": files}


# simulate / nash -----------------------------------------------------------------


def _scale_contracts(contracts, scale):
    if scale == 1.0:
        return tuple(contracts)
    out = []
    for c in contracts:
        beta = (lambda f: (lambda t, X: scale * f(t, X)))(c.beta) if callable(c.beta) else scale * c.beta
        out.append(sim.ContractTriple(c.y, c.alpha, beta))
    return tuple(out)


def _contracts(cfg, p, params, spec):
    kind = cfg.simulation.contracts
    if kind == "equilibrium":
        if not spec.is_lq:
            raise ConfigError("closed-form contracts need model.spec = 'lq'", "simulation.contracts")
        contracts, z_ref = sim.lq_equilibrium_contracts(p, params), lq.solve(p).beta_bar
    elif kind == "grid":
        g = cfg.grid
        grid = hjb.Grid.build(params, g.lo, g.hi, g.n_x, None if g.n_t == 0 else g.n_t, g.scheme)
        gs = hjb.solve(params, spec, grid, None, g.snapshots, g.boundary, cfg.threads)
        contracts = sim.contracts_from_grid(gs, params, spec)
        from scipy.interpolate import RegularGridInterpolator

        bb = RegularGridInterpolator([gs.times] + grid.axes, np.moveaxis(gs.beta_bar, 1, -1))
        lo = np.concatenate([[0.0], grid.lo])
        hi = np.concatenate([[grid.horizon], grid.hi])

        def z_ref(t, X):
            q = np.concatenate([np.full((X.shape[0], 1), t), X], axis=1)
            return bb(np.clip(q, lo, hi))
    else:
        w = cfg.simulation.wage
        shares = cfg.model.y_shares
        contracts = tuple(sim.ContractTriple(shares[i] * w, 0.0, np.zeros(2)) for i in range(2))
        z_ref = np.zeros(2)
    return _scale_contracts(contracts, cfg.simulation.beta_scale), z_ref


def cmd_simulate(cfg: cfgmod.RunConfig, out: Path) -> dict:
    p, params, spec = build_model(cfg)
    contracts, z_ref = _contracts(cfg, p, params, spec)
    s = cfg.simulation
    scfg = _sim_config(cfg)
    report = sim.simulate_report(contracts, spec, params, scfg, z_ref)
    if s.best_response_check:
        report.best_response_table = sim.agent_best_response_check(
            contracts, spec, params, scfg, s.offsets, raise_on_violation=False)
    fmt = cfg.output.format
    est, se = report.agent_utility
    record = {
        "agent_utility": est, "agent_utility_se": se,
        "predicted_agent_utility": report.predicted_agent_utility,
        "within_3se": bool(abs(est - report.predicted_agent_utility) <= 3 * se),
    }
    for i, (e, sd) in enumerate(report.principal_payoffs, start=1):
        record[f"principal_{i}_payoff"] = e
        record[f"principal_{i}_payoff_se"] = sd
    for k, v in report.equilibrium_residuals.items():
        record[f"residual_{k}"] = v
    record.update({"n_paths": s.n_paths, "dt": report.settings["dt"], "seed": cfg.seed,
                   "antithetic": s.antithetic, "contracts": s.contracts, "beta_scale": s.beta_scale})
    files = []
    if fmt == "json":
        files.append(io.write_json(out / "simulate.json", "simulate", report.to_dict() | {"record": record}))
    else:
        files.append(io.write_record(out, "simulate", fmt, record))
        if report.best_response_table:
            files.append(io.write_table(out, "best_response", fmt,
                                        ["policy", "delta", "se", "violation"],
                                        report.best_response_table))
    if s.dump_paths:
        dump = sim.simulate_paths(params, spec, sim.response_policy(contracts, spec),
                                  _sim_config(cfg, keep_paths=True, record_stride=s.record_stride),
                                  contracts)
        cols = ["path_id", "t", "x1", "x2", "xi_1", "xi_2"]

        def rows():
            for pid in range(dump.n_paths):
                for k, t in enumerate(dump.record_times):
                    yield [pid, t, *dump.states[k, pid], *dump.xi_path[k, pid]]

        files.append(io.write_table(out, "paths", fmt, cols, rows()))
    violations = [r for r in report.best_response_table if r["violation"]]
    if violations:
        from .errors import BestResponseViolation

        raise BestResponseViolation(f"{violations[0]['policy']} beats the best response",
                                    report.best_response_table)
    return {"record": record, "report": report, "files": files}


def cmd_nash_check(cfg: cfgmod.RunConfig, out: Path) -> dict:
    p, params, spec = build_model(cfg)
    if cfg.simulation.contracts == "fixed":
        raise ConfigError("Nash checks need equilibrium or grid contracts", "simulation.contracts")
    contracts, _ = _contracts(cfg, p, params, spec)
    n = cfg.nash
    i = n.principal - 1
    devs = sim.offset_deviations(i, n.offsets)
    for axis in range(2):
        for s in n.profile:
            off = [0.0, 0.0]
            off[axis] = float(s)
            devs.append(sim.Deviation(i, tuple(off), label=f"profile e{axis + 1} {s:+g}"))
    if n.free_rider:
        devs.append(sim.Deviation(i, beta=(0.0, 0.0), alpha=0.0, label="free rider"))
    if n.identical:
        devs.append(sim.Deviation(i, (0.0, 0.0), label="identical"))
    rows = sim.nash_deviation_check(contracts, devs, spec, params, _sim_config(cfg),
                                    raise_on_violation=False)
    summary = {"principal": n.principal, "n_deviations": len(rows),
               "violations": sum(r["violation"] for r in rows),
               "max_delta_over_se": max((r["delta"] / r["se"] if r["se"] > 0 else
                                         (0.0 if r["delta"] == 0 else math.copysign(math.inf, r["delta"])))
                                        for r in rows),
               "note": sim.LOCAL_CERTIFICATION_NOTE}
    for axis in range(2):
        prof = [r for r in rows if r["deviation"].startswith(f"profile e{axis + 1} ")]
        fit = sim.fit_concave_profile([r["offset"][axis] for r in prof], [r["delta"] for r in prof])
        summary[f"profile_e{axis + 1}_curvature"] = fit["a"]
        summary[f"profile_e{axis + 1}_vertex"] = fit["vertex"]
        summary[f"profile_e{axis + 1}_concave"] = fit["concave"]
    for label in ("free rider", "identical"):
        for r in rows:
            if r["deviation"] == label:
                key = label.replace(" ", "_")
                summary[f"{key}_delta"] = r["delta"]
                summary[f"{key}_se"] = r["se"]
    table = [{**r, "offset1": (r.get("offset") or [None, None])[0],
              "offset2": (r.get("offset") or [None, None])[1]} for r in rows]
    cols = ["deviation", "principal", "offset1", "offset2", "delta", "se", "violation",
            "agent_utility", "agent_utility_se"]
    fmt = cfg.output.format
    files = [io.write_table(out, "nash", fmt, cols, table),
             io.write_record(out, "nash_summary", fmt, summary)]
    bad = [r for r in rows if r["violation"]]
    if bad:
        raise NashViolation(f"deviation {bad[0]['deviation']} improves Principal {n.principal}", rows)
    return {"rows": rows, "summary": summary, "files": files}


# sensitivity ---------------------------------------------------------------------

SENSITIVITY_COLUMNS = ["index", "parameter", "value", "nu1", "nu2", "nua1", "nua2", "d",
                       "d_closed_form", "delta", "delta_a", "works_more_for_1",
                       "dominance_threshold", "dominance_predicted"]


def sensitivity_row(index: int, parameter: str, value: float, base: lq.LQParams) -> dict:
    try:
        p = base.replace(**{parameter: value})
    except ConfigError as exc:
        raise ConfigError(f"sweep point {index} ({parameter}={value}): {exc}", "sweep") from exc
    sol = lq.solve(p)
    nu = sol.nu_star
    row = {"index": index, "parameter": parameter, "value": value, "nu1": nu[0], "nu2": nu[1],
           "nua1": sol.nu_aggregated[0], "nua2": sol.nu_aggregated[1],
           "d": _safe(lambda: lq.proportion_gap_matrix(p)),
           "d_closed_form": _safe(lambda: lq.proportion_gap(p.rho, p))
           if p.k1 == p.k2 and p.sigma is None else None,
           "delta": sol.delta, "delta_a": sol.delta_a,
           "works_more_for_1": bool(nu[0] > nu[1]),
           "dominance_threshold": lq.dominance_threshold(p.gamma2 - p.gamma1),
           "dominance_predicted": None}
    if p.risk_aversion == 0 and np.allclose(p.sigma_matrix, np.eye(2)):
        row["dominance_predicted"] = lq.dominance_condition(p)[0]
    return row


def sweep_values(sw: cfgmod.SweepSection) -> np.ndarray:
    if sw.count == 1:
        return np.array([sw.lo])
    if sw.log:
        return np.geomspace(sw.lo, sw.hi, sw.count)
    return np.linspace(sw.lo, sw.hi, sw.count)


def cmd_sensitivity(cfg: cfgmod.RunConfig, out: Path) -> dict:
    base = lq_params(cfg)
    sw = cfg.sweep
    values = sweep_values(sw)

    def work(item):
        k, v = item
        return sensitivity_row(k, sw.parameter, float(v), base)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            rows = list(pool.map(work, enumerate(values)))
    else:
        rows = [work(item) for item in enumerate(values)]
    files = [io.write_table(out, "sensitivity", cfg.output.format, SENSITIVITY_COLUMNS, rows)]
    return {"rows": rows, "files": files}


# entry point ---------------------------------------------------------------------

COMMANDS = {
    "lq": cmd_lq,
    "hjb": cmd_hjb,
    "simulate": cmd_simulate,
    "nash-check": cmd_nash_check,
    "sensitivity": cmd_sensitivity,
}


def _add_global_flags(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="TOML run configuration")
    parser.add_argument("--seed", type=int, metavar="U64", default=default)
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default=default)
    parser.add_argument("--threads", type=int, metavar="N", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="commonagency",
        description="Equilibrium contracts for one Agent shared by several Principals.")
    _add_global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "lq": "closed-form two-Principal linear-quadratic solution and benchmarks",
        "hjb": "finite-difference solution for risk-neutral Principals",
        "simulate": "Monte Carlo check of the Agent's optimality and participation",
        "nash-check": "Monte Carlo payoff changes under unilateral contract deviations",
        "sensitivity": "comparative statics sweep over one parameter",
    }
    for name, text in helps.items():
        _add_global_flags(sub.add_parser(name, help=text, description=text), suppress=True)
    return parser


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    cfg = cfgmod.load(args.config)
    cfg = cfgmod.override(cfg, seed=args.seed, out=args.out, fmt=args.format, threads=args.threads)
    out = Path(cfg.output.dir)
    _write_echo(out, args.command, cfg)
    return COMMANDS[args.command](cfg, out)


def main(argv=None) -> int:
    try:
        run(argv)
    except ConfigError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except CommonAgencyError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

import math

import numpy as np
import pytest

from commonagency import hjb, lq, model, sim
from commonagency.errors import BestResponseViolation, ConfigError, NashViolation, NumericOverflow
from commonagency.lq import LQParams
from commonagency.model import EffortPolicy, LinearQuadratic
from commonagency.sim import ContractTriple, Deviation, SimConfig


@pytest.fixture(scope="module")
def symmetric():
    p = LQParams()
    return p, p.model_params(), p.spec(), sim.lq_equilibrium_contracts(p)


def zero_policy(n=2):
    return EffortPolicy.constant_effort(np.zeros(n))


# configuration ---------------------------------------------------------------------------


@pytest.mark.parametrize("kw,key", [
    ({"n_paths": 50}, "n_paths"), ({"dt": 0.0}, "dt"), ({"seed": -1}, "seed"),
    ({"block_size": 3}, "block_size"), ({"n_paths": 101}, "n_paths"), ({"threads": 0}, "threads"),
])
def test_invalid_sim_config(kw, key):
    with pytest.raises(ConfigError) as err:
        SimConfig(**kw)
    assert err.value.key == f"simulation.{key}"


def test_step_count_and_budget():
    assert SimConfig(dt=0.3).steps(1.0) == (4, 0.25)
    with pytest.raises(ConfigError, match="horizon"):
        SimConfig(dt=2.0).steps(1.0)
    with pytest.raises(ConfigError, match="budget"):
        SimConfig(n_paths=1000, dt=1e-3, budget=1e5).steps(1.0)


def test_contract_triple_requires_beta_and_checks_bounds():
    with pytest.raises(ConfigError):
        ContractTriple(0.0, 0.0)
    c = ContractTriple(1.0, 0.5, [1.0, 0.0])
    assert c.is_constant and c.check_bounded([-3, -3], [3, 3], 1.0)
    wild = ContractTriple(0.0, lambda t, X: 1e9 * X[:, 0] ** 3, [0.0, 0.0])
    assert not wild.is_constant and not wild.check_bounded([-3, -3], [3, 3], 1.0)


# paths -------------------------------------------------------------------------------------


def test_driftless_paths_are_martingales():
    mp = LQParams(rho=0.4).model_params()
    paths = sim.simulate_paths(mp, LinearQuadratic([1, 1]), zero_policy(),
                               SimConfig(n_paths=4000, dt=0.05, antithetic=False, seed=3))
    for a in range(2):
        mean, se = sim.mean_and_se(paths.X_T[:, a], False)
        assert abs(mean) <= 3 * se


def test_constant_effort_shifts_terminal_mean(symmetric):
    p, mp, spec, _ = symmetric
    nu = lq.solve(p).nu_star
    paths = sim.simulate_paths(mp, spec, EffortPolicy.constant_effort(nu),
                               SimConfig(n_paths=2000, dt=0.1, antithetic=False, seed=5))
    expected = mp.x0 + p.horizon * p.K @ nu
    for a in range(2):
        mean, se = sim.mean_and_se(paths.X_T[:, a], False)
        assert abs(mean - expected[a]) <= 3 * se


def test_terminal_state_is_exact_for_constant_drift(symmetric):
    # with constant drift Euler-Maruyama has no discretization bias: X_T - x0 - T b = Sigma W_T
    _, mp, spec, _ = symmetric
    cfg = SimConfig(n_paths=200, dt=0.01, seed=1, keep_paths=True)
    paths = sim.simulate_paths(mp, spec, EffortPolicy.constant_effort([0.3, -0.2]), cfg)
    noise = paths.states[-1] - paths.states[0] - np.array([0.3, -0.2])
    increments = np.diff(paths.states, axis=0) - 0.01 * np.array([0.3, -0.2])
    assert np.allclose(noise, increments.sum(axis=0), atol=1e-12)


def test_seeded_runs_are_bitwise_identical(symmetric):
    _, mp, spec, contracts = symmetric
    policy = sim.response_policy(contracts, spec)
    cfg = SimConfig(n_paths=1000, dt=0.05, seed=42, block_size=256)
    a = sim.simulate_paths(mp, spec, policy, cfg, contracts)
    b = sim.simulate_paths(mp, spec, policy, cfg, contracts)
    c = sim.simulate_paths(mp, spec, policy, SimConfig(**{**cfg.__dict__, "threads": 3}), contracts)
    for other in (b, c):
        assert np.array_equal(a.X_T, other.X_T)
        assert np.array_equal(a.xi, other.xi)
        assert np.array_equal(a.cost, other.cost)
    d = sim.simulate_paths(mp, spec, policy, SimConfig(**{**cfg.__dict__, "seed": 43}), contracts)
    assert not np.array_equal(a.X_T, d.X_T)


def test_antithetic_pairs_mirror_noise():
    mp = LQParams().model_params()
    paths = sim.simulate_paths(mp, LinearQuadratic([1, 1]), zero_policy(),
                               SimConfig(n_paths=200, dt=0.1, seed=0))
    assert np.allclose(paths.X_T[0::2], -paths.X_T[1::2], atol=1e-14)


def test_antithetic_sampling_reduces_error_of_linear_payoff(symmetric):
    p, mp, spec, _ = symmetric
    pol = EffortPolicy.constant_effort(lq.solve(p).nu_star)
    anti = sim.simulate_paths(mp, spec, pol, SimConfig(n_paths=2000, dt=0.1, seed=2))
    plain = sim.simulate_paths(mp, spec, pol, SimConfig(n_paths=2000, dt=0.1, seed=2,
                                                        antithetic=False))
    _, se_anti = sim.mean_and_se(anti.X_T.sum(axis=1), True)
    _, se_plain = sim.mean_and_se(plain.X_T.sum(axis=1), False)
    assert se_anti < 1e-10 < se_plain


def test_exploding_paths_raise_overflow():
    mp = LQParams().model_params()
    with pytest.raises(NumericOverflow):
        sim.simulate_paths(mp, LinearQuadratic([1, 1]), EffortPolicy.constant_effort([1e12, 0.0]),
                           SimConfig(n_paths=100, dt=0.1, antithetic=False))


def test_feedback_policy_and_generic_spec_paths():
    mp = LQParams().model_params()
    poly = model.polynomial_spec([1.0, 1.0])
    pol = EffortPolicy(lambda t, X: -0.5 * X)
    cfg = SimConfig(n_paths=100, dt=0.1, seed=9)
    a = sim.simulate_paths(mp, poly, pol, cfg)
    b = sim.simulate_paths(mp, LinearQuadratic([1, 1]), pol, cfg)
    assert np.allclose(a.X_T, b.X_T, atol=1e-14)
    assert np.allclose(a.cost, b.cost, atol=1e-14)


# accrual and utilities ----------------------------------------------------------------------


def test_constant_drift_contract_accrues_exactly():
    mp = LQParams().model_params()
    cfg = SimConfig(n_paths=100, dt=0.1, keep_paths=True)
    c = ContractTriple(0.2, 0.7, [0.0, 0.0])
    paths = sim.simulate_paths(mp, LinearQuadratic([1, 1]), zero_policy(), cfg, [c])
    assert np.allclose(paths.xi[:, 0], 0.9, atol=1e-14)
    assert np.allclose(sim.accrue_contract(paths, c), 0.9, atol=1e-14)


def test_accrual_matches_on_the_fly_and_is_linear(symmetric):
    _, mp, spec, contracts = symmetric
    cfg = SimConfig(n_paths=200, dt=0.05, keep_paths=True, seed=4)
    paths = sim.simulate_paths(mp, spec, sim.response_policy(contracts, spec), cfg, contracts)
    for i, c in enumerate(contracts):
        assert np.allclose(sim.accrue_contract(paths, c), paths.xi[:, i], atol=1e-12)
    feedback = ContractTriple(0.1, lambda t, X: X[:, 0], lambda t, X: np.sin(X))
    doubled = ContractTriple(0.1, lambda t, X: X[:, 0], lambda t, X: 2 * np.sin(X))
    no_beta = ContractTriple(0.1, lambda t, X: X[:, 0], [0.0, 0.0])
    base = sim.accrue_contract(paths, no_beta)
    assert np.allclose(sim.accrue_contract(paths, doubled) - base,
                       2 * (sim.accrue_contract(paths, feedback) - base), atol=1e-12)


def test_accrual_needs_full_recording(symmetric):
    _, mp, spec, contracts = symmetric
    with pytest.raises(ValueError):
        sim.accrue_contract(sim.simulate_paths(mp, spec, zero_policy(), SimConfig(n_paths=100)),
                            contracts[0])
    strided = sim.simulate_paths(mp, spec, zero_policy(),
                                 SimConfig(n_paths=100, keep_paths=True, record_stride=5))
    with pytest.raises(ValueError):
        sim.accrue_contract(strided, contracts[0])


def test_equilibrium_total_wage_mean(symmetric):
    p, mp, spec, contracts = symmetric
    sol = lq.solve(p)
    paths = sim.simulate_paths(mp, spec, sim.response_policy(contracts, spec),
                               SimConfig(n_paths=4000, dt=0.05, seed=8, antithetic=False), contracts)
    mean, se = sim.mean_and_se(paths.xi.sum(axis=1), False)
    assert abs(mean - (sol.r0 + sol.delta * p.horizon)) <= 3 * se


def test_participation_binds_at_equilibrium():
    p = LQParams(k1=1.4, k2=0.8, rho=0.3, gamma1=0.5, risk_aversion=1.5, reservation_utility=-2.0)
    mp, spec = p.model_params(), p.spec()
    contracts = sim.lq_equilibrium_contracts(p)
    paths = sim.simulate_paths(mp, spec, sim.response_policy(contracts, spec),
                               SimConfig(n_paths=20000, dt=0.02, seed=11), contracts)
    est, se = sim.agent_utility(paths, mp)
    assert abs(est - p.reservation_utility) <= 3 * se


def test_deterministic_wage_utility_is_exact():
    mp = LQParams(risk_aversion=2.0).model_params()
    paths = sim.simulate_paths(mp, LinearQuadratic([1, 1]), zero_policy(),
                               SimConfig(n_paths=100, dt=0.1),
                               [ContractTriple(0.3, 0.0, [0.0, 0.0]), ContractTriple(0.2, 0.0, [0.0, 0.0])])
    est, se = sim.agent_utility(paths, mp)
    assert est == pytest.approx(-math.exp(-2.0 * 0.5), rel=1e-14)
    assert se == 0.0


def test_small_risk_aversion_taylor_expansion():
    ra = 1e-3
    p = LQParams(risk_aversion=ra)
    mp, spec = p.model_params(), p.spec()
    contracts = sim.lq_equilibrium_contracts(p)
    paths = sim.simulate_paths(mp, spec, sim.response_policy(contracts, spec),
                               SimConfig(n_paths=2000, dt=0.05, seed=6), contracts)
    est, _ = sim.agent_utility(paths, mp)
    net = paths.xi.sum(axis=1) - paths.cost
    first_order = -1.0 + ra * float(np.mean(net))
    assert abs(est - first_order) <= ra**2 * float(np.mean(net**2))


def test_principal_payoff_samples(symmetric):
    _, mp, spec, contracts = symmetric
    paths = sim.simulate_paths(mp, spec, zero_policy(), SimConfig(n_paths=100), contracts)
    pay = sim.principal_payoff_samples(paths, mp)
    assert pay.shape == (100, 2)
    assert np.allclose(pay[:, 0], paths.X_T[:, 0] - paths.xi[:, 0])


# best response ------------------------------------------------------------------------------


def test_best_response_check_passes_for_equilibrium(symmetric):
    _, mp, spec, contracts = symmetric
    rows = sim.agent_best_response_check(contracts, spec, mp, SimConfig(n_paths=2000, dt=0.05))
    assert len(rows) == 8
    assert all(not r["violation"] and r["delta"] < 0 for r in rows)


def test_zero_contracts_best_response_is_no_effort():
    mp = LQParams().model_params()
    spec = LinearQuadratic([1, 1])
    zero = [ContractTriple(0.0, 0.0, [0.0, 0.0])] * 2
    assert np.array_equal(sim.response_policy(zero, spec).constant, [0.0, 0.0])
    rows = sim.agent_best_response_check(zero, spec, mp, SimConfig(n_paths=200, dt=0.1))
    assert all(r["delta"] < 0 for r in rows)


def test_doubled_sensitivity_moves_best_response(symmetric):
    p, mp, spec, contracts = symmetric
    doubled = [ContractTriple(c.y, c.alpha, 2 * c.beta) for c in contracts]
    target = p.K @ (2 * lq.solve(p).M @ p.Gamma)
    assert np.allclose(sim.response_policy(doubled, spec).constant, target)
    old = EffortPolicy.constant_effort(lq.solve(p).nu_star)
    rows = sim.agent_best_response_check(doubled, spec, mp, SimConfig(n_paths=1000, dt=0.05),
                                         offsets=(), extra_policies={"old": old})
    assert rows[0]["delta"] < -2 * rows[0]["se"]


class LazyResponse(LinearQuadratic):
    """A deliberately wrong best response (no effort), as a buggy spec would give."""

    def best_response(self, t, x, z):
        return np.zeros_like(np.asarray(z, dtype=float))


def test_best_response_violation_is_raised(symmetric):
    _, mp, _, contracts = symmetric
    with pytest.raises(BestResponseViolation) as err:
        sim.agent_best_response_check(contracts, LazyResponse([1, 1]), mp,
                                      SimConfig(n_paths=1000, dt=0.05))
    assert any(r["violation"] for r in err.value.report)
    rows = sim.agent_best_response_check(contracts, LazyResponse([1, 1]), mp,
                                         SimConfig(n_paths=1000, dt=0.05), raise_on_violation=False)
    assert len(rows) == 8


# Nash deviations ------------------------------------------------------------------------------


def test_offset_deviations_grid():
    devs = sim.offset_deviations(0, (-0.2, 0.2))
    assert [d.beta_offset for d in devs] == [(-0.2, -0.2), (-0.2, 0.2), (0.2, -0.2), (0.2, 0.2)]
    assert devs[0].name() == "beta1+[-0.2, -0.2]"


def test_nash_deviation_deltas_match_closed_form(symmetric):
    p, mp, spec, contracts = symmetric
    sol = lq.solve(p)
    devs = sim.offset_deviations(0)
    rows = sim.nash_deviation_check(contracts, devs, spec, mp, SimConfig(n_paths=1000, dt=0.05))
    quad = mp.risk_aversion * mp.cov + np.diag(spec.k**2)
    for row in rows:
        eps = np.array(row["offset"])
        assert row["delta"] == pytest.approx(-0.5 * eps @ quad @ eps * p.horizon, abs=1e-9)
        assert not row["violation"]
    profile = sim.fit_concave_profile([r["offset"][0] for r in rows if r["offset"][1] == 0.05],
                                      [r["delta"] for r in rows if r["offset"][1] == 0.05])
    assert profile["concave"] and abs(profile["vertex"]) < 1e-6
    assert sol.nu_star is not None


def test_free_rider_and_identical_deviations(symmetric):
    _, mp, spec, contracts = symmetric
    cfg = SimConfig(n_paths=1000, dt=0.05)
    free = Deviation(0, beta=(0.0, 0.0), alpha=0.0, label="free rider")
    same = Deviation(0, beta_offset=(0.0, 0.0), alpha="keep")
    rows = sim.nash_deviation_check(contracts, [free, same], spec, mp, cfg)
    assert rows[0]["delta"] < -2 * rows[0]["se"]
    assert rows[0]["delta"] == pytest.approx(-5 / 9, abs=1e-9)
    assert rows[1]["delta"] == 0.0


def test_profitable_deviation_raises(symmetric):
    p, mp, spec, _ = symmetric
    # contracts that under-incentivize leave room for a profitable increase
    weak = (ContractTriple(0.0, 0.0, [0.0, 0.0]), ContractTriple(0.0, 0.0, [0.0, 0.0]))
    with pytest.raises(NashViolation) as err:
        sim.nash_deviation_check(weak, [Deviation(0, beta_offset=(0.2, 0.0))], spec, mp,
                                 SimConfig(n_paths=500, dt=0.05))
    assert err.value.report[0]["delta"] > 0


def test_deviation_keeps_participation_binding(symmetric):
    _, mp, spec, contracts = symmetric
    trial = sim.apply_deviation(contracts, Deviation(1, beta_offset=(0.1, -0.2)), spec, mp)
    assert sum(c.y for c in trial) == pytest.approx(mp.r0)
    z = trial[0].beta + trial[1].beta
    assert trial[0].alpha + trial[1].alpha == pytest.approx(model.generator_G(0, None, z, mp, spec))
    with pytest.raises(ConfigError):
        sim.apply_deviation(contracts, Deviation(2), spec, mp)


# residuals and reports -------------------------------------------------------------------------


def test_equilibrium_residuals(symmetric):
    p, mp, spec, contracts = symmetric
    cfg = SimConfig(n_paths=200, dt=0.05, keep_paths=True, record_stride=4)
    paths = sim.simulate_paths(mp, spec, sim.response_policy(contracts, spec), cfg, contracts)
    z = lq.solve(p).beta_bar
    res = sim.equilibrium_residuals(contracts, spec, mp, paths, z_ref=z)
    assert max(res.values()) <= 1e-12
    bumped = (ContractTriple(contracts[0].y, contracts[0].alpha + 0.1, contracts[0].beta), contracts[1])
    assert sim.equilibrium_residuals(bumped, spec, mp, paths, z_ref=z)["alpha"] == \
        pytest.approx(0.1, abs=1e-12)


def test_grid_contracts_reproduce_equilibrium():
    p = LQParams(gamma1=0.3)
    mp, spec = p.model_params(), p.spec()
    gs = hjb.solve(mp, spec, hjb.Grid.build(mp, -3, 3, 31), n_snapshots=3)
    contracts = sim.contracts_from_grid(gs, mp, spec)
    report = sim.simulate_report(contracts, spec, mp, SimConfig(n_paths=1000, dt=0.05),
                                 z_ref=lq.solve(p).beta_bar)
    res = report.equilibrium_residuals
    assert res["y"] <= 1e-15 and res["alpha"] <= 1e-12 and res["beta"] <= 1e-10
    est, se = report.agent_utility
    assert abs(est - p.reservation_utility) <= 3 * se


def test_simulate_report_fields(symmetric):
    _, mp, spec, contracts = symmetric
    rep = sim.simulate_report(contracts, spec, mp, SimConfig(n_paths=400, dt=0.1))
    d = rep.to_dict()
    assert d["predicted_agent_utility"] == pytest.approx(-1.0)
    assert d["agent_utility"]["se"] >= 0 and len(d["principal_payoffs"]) == 2
    assert all(math.isfinite(v["estimate"]) for v in d["principal_payoffs"])
    assert sim.LOCAL_CERTIFICATION_NOTE in d["notes"]


def test_euler_step_halving_within_one_standard_error():
    p = LQParams(k1=1.2, k2=0.9, rho=0.2, gamma1=0.3)
    mp, spec = p.model_params(), p.spec()
    contracts = sim.lq_equilibrium_contracts(p)
    policy = sim.response_policy(contracts, spec)
    coarse = sim.agent_utility(sim.simulate_paths(mp, spec, policy, SimConfig(dt=1e-2), contracts), mp)
    fine = sim.agent_utility(sim.simulate_paths(mp, spec, policy, SimConfig(dt=5e-3), contracts), mp)
    assert abs(coarse[0] - fine[0]) < max(coarse[1], fine[1])

import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from commonagency import lq
from commonagency.errors import ConfigError, SingularMatrix
from commonagency.lq import LQParams
from conftest import as_float

eff = st.floats(0.2, 4.0)
appetence = st.floats(0.0, 1.0)
risk = st.floats(0.0, 5.0)
corr = st.floats(-0.95, 0.95)


def params_from(case):
    p = case["params"]
    return LQParams(k1=as_float(p["k1"]), k2=as_float(p["k2"]), rho=as_float(p["rho"]),
                    gamma1=as_float(p["gamma1"]), gamma2=as_float(p["gamma2"]),
                    risk_aversion=as_float(p["risk_aversion"]))


# closed forms against exact arithmetic --------------------------------------------


@pytest.mark.parametrize("name", ["symmetric", "asymmetric", "correlated"])
def test_solution_matches_exact_oracle(frozen, name):
    case = frozen["lq_exact"][name]
    sol = lq.solve(params_from(case))
    assert np.allclose(sol.M, as_float(case["M"]), atol=1e-14)
    assert np.allclose(sol.Ma, as_float(case["Ma"]), atol=1e-14)
    assert np.allclose(sol.nu_star, as_float(case["nu"]), atol=1e-14)
    assert np.allclose(sol.nu_aggregated, as_float(case["nu_a"]), atol=1e-14)
    assert np.allclose(sol.beta1, as_float(case["beta1"]), atol=1e-14)
    assert np.allclose(sol.beta2, as_float(case["beta2"]), atol=1e-14)
    for attr, key in (("lam", "lambda"), ("lambda_tilde", "lambda_tilde"),
                      ("delta", "delta"), ("delta_a", "delta_a")):
        assert getattr(sol, attr) == pytest.approx(as_float(case[key]), abs=1e-13)


def test_symmetric_example_values():
    sol = lq.solve(LQParams())
    assert np.allclose(sol.M, np.eye(2) / 3)
    assert np.allclose(sol.nu_star, [1 / 3, 1 / 3])
    assert np.allclose(sol.Ma, np.eye(2) / 2)
    assert np.allclose(sol.nu_aggregated, [0.5, 0.5])
    assert sol.lam == pytest.approx(4 / 9)
    assert sol.lambda_tilde == pytest.approx(2 / 9)
    assert sol.delta == pytest.approx(2 / 9)
    assert sol.delta_a == pytest.approx(0.5)
    assert sol.y_split == (0.0, 0.0)
    # with Sigma = K = I and R_A = 1 the generator vanishes at M Gamma
    assert sol.alpha_rate == pytest.approx(0.0, abs=1e-15)
    assert sol.alpha_split[0] == sol.alpha_split[1]


def test_risk_neutral_identity_volatility_gives_first_best_effort():
    p = LQParams(k1=2.0, k2=0.5, gamma1=0.3, gamma2=0.7, risk_aversion=0.0)
    sol = lq.solve(p)
    assert np.array_equal(sol.M, np.eye(2))
    assert np.allclose(sol.nu_star, p.K @ p.Gamma)
    assert sol.first_best_wage is None


def test_swap_symmetry_equal_appetence():
    sol = lq.solve(LQParams(k1=1.5, k2=1.5, gamma1=0.4, gamma2=0.4, rho=0.3, risk_aversion=2.0))
    assert sol.nu_star[0] == pytest.approx(sol.nu_star[1], rel=1e-14)


def test_record_columns():
    rec = lq.solve(LQParams()).record()
    assert tuple(rec) == lq.RECORD_COLUMNS
    assert rec["nu1"] == pytest.approx(1 / 3) and rec["nua1"] == pytest.approx(0.5)
    assert rec["first_best_wage"] == pytest.approx(1.0)


@pytest.mark.parametrize("kw,key", [
    ({"rho": 1.0}, "rho"), ({"rho": -1.0}, "rho"), ({"rho": 1.5}, "rho"),
    ({"k1": 0.0}, "k1"), ({"k2": -1.0}, "k2"), ({"gamma2": 1.2}, "gamma2"),
    ({"risk_aversion": -0.1}, "risk_aversion"), ({"reservation_utility": 0.0}, "reservation_utility"),
    ({"horizon": 0.0}, "horizon"), ({"y_shares": (0.5, 0.6)}, "y_shares"),
])
def test_invalid_parameters_rejected(kw, key):
    with pytest.raises(ConfigError) as err:
        LQParams(**kw)
    assert err.value.key == key


def test_nearly_perfect_correlation_accepted():
    p = LQParams(rho=1 - 1e-9)
    assert np.all(np.isfinite(lq.solve(p).nu_star))


def test_singular_matrices_detected():
    with pytest.raises(SingularMatrix):
        lq.inv2(np.array([[1.0, 2.0], [0.5, 1.0]]))
    # a rank-one covariance with vanishing efficiencies makes R_A Sigma Sigma^T + K^2 singular
    with pytest.raises(SingularMatrix):
        lq.solve(LQParams(k1=1e-7, k2=1e-7, sigma=[[1.0, 1.0], [1.0, 1.0]]))


# value functions ---------------------------------------------------------------------


def test_value_functions_symmetric():
    p = LQParams()
    sol = lq.solve(p)
    assert lq.value_V(0.0, [0, 0], sol, p) == pytest.approx(4 / 9)
    assert lq.value_vi(1, 0.0, [0, 0], sol, p) == pytest.approx(2 / 9)
    assert lq.value_vi(2, 0.0, [0, 0], sol, p) == pytest.approx(2 / 9)
    with pytest.raises(ValueError):
        lq.value_vi(3, 0.0, [0, 0], sol, p)


def test_terminal_value_of_first_principal():
    p = LQParams(gamma1=0.4, gamma2=0.1, risk_aversion=0.7)
    sol = lq.solve(p)
    assert lq.value_vi(1, p.horizon, [2.0, -1.0], sol, p) == pytest.approx(1.4 * 2.0 + 0.4)


@given(eff, eff, corr, appetence, appetence, risk,
       st.floats(0, 1), st.floats(-5, 5), st.floats(-5, 5))
def test_decomposition_identity(k1, k2, rho, g1, g2, ra, t, x1, x2):
    p = LQParams(k1=k1, k2=k2, rho=rho, gamma1=g1, gamma2=g2, risk_aversion=ra)
    sol = lq.solve(p)
    x = [x1, x2]
    assert 2 * sol.lambda_tilde == pytest.approx(sol.lam, rel=1e-12, abs=1e-12)
    total = lq.value_vi(1, t, x, sol, p) + lq.value_vi(2, t, x, sol, p)
    assert total == pytest.approx(lq.value_V(t, x, sol, p), abs=1e-12 * (1 + abs(x1) + abs(x2)))


@given(eff, eff, corr, appetence, appetence, risk)
def test_effort_equals_k_times_beta_sum(k1, k2, rho, g1, g2, ra):
    p = LQParams(k1=k1, k2=k2, rho=rho, gamma1=g1, gamma2=g2, risk_aversion=ra)
    sol = lq.solve(p)
    assert np.allclose(sol.nu_star, p.K @ sol.beta_bar, rtol=0, atol=1e-12)
    assert np.allclose(sol.beta_bar, sol.M @ p.Gamma, rtol=0, atol=1e-12)
    g = p.Gamma
    assert g.min() >= 0 and g.max() <= 2 and g.sum() == pytest.approx(2.0)


@given(eff, eff, corr, appetence, appetence, risk)
def test_pde_residuals_vanish(k1, k2, rho, g1, g2, ra):
    p = LQParams(k1=k1, k2=k2, rho=rho, gamma1=g1, gamma2=g2, risk_aversion=ra)
    res = lq.hjb_residuals(lq.solve(p), p)
    assert max(res.values()) <= 1e-10


# benchmarks --------------------------------------------------------------------------


def test_first_best_matches_grid_oracle(frozen):
    eff1, wage1 = lq.first_best(LQParams())
    fb = frozen["first_best"]
    assert np.allclose(eff1, fb["identity"]["effort"])
    assert wage1 == pytest.approx(fb["identity"]["wage"])
    eff2, wage2 = lq.first_best(LQParams(k1=2.0, k2=1.0, gamma1=1.0, gamma2=0.0))
    assert np.allclose(eff2, fb["k21_gamma10"]["effort"])
    assert wage2 == pytest.approx(fb["k21_gamma10"]["wage"])


@given(st.floats(0.1, 5), st.floats(-5, -0.01))
def test_first_best_effort_independent_of_preferences(ra, r0u):
    p = LQParams(k1=1.3, k2=0.6, gamma1=0.2, risk_aversion=ra, reservation_utility=r0u)
    effort, wage = lq.first_best(p)
    assert np.allclose(effort, lq.first_best(LQParams(k1=1.3, k2=0.6, gamma1=0.2))[0])
    assert wage == pytest.approx(0.5 * float(effort @ effort) - math.log(-r0u) / ra)


def test_first_best_requires_risk_aversion():
    with pytest.raises(ValueError):
        lq.first_best(LQParams(risk_aversion=0.0))


def test_risk_neutral_aggregation_gap_vanishes():
    p = LQParams(k1=1.7, k2=0.4, gamma1=0.2, rho=0.6, risk_aversion=0.0)
    sol = lq.solve(p)
    assert np.linalg.norm(sol.nu_star - sol.nu_aggregated) == 0.0


@given(eff, eff, corr, appetence, appetence, st.floats(0.05, 5))
def test_aggregation_gap_positive_with_risk(k1, k2, rho, g1, g2, ra):
    sol = lq.solve(LQParams(k1=k1, k2=k2, rho=rho, gamma1=g1, gamma2=g2, risk_aversion=ra))
    assert np.linalg.norm(sol.nu_star - sol.nu_aggregated) > 0


@given(eff, eff, corr, appetence, appetence)
def test_aggregation_gap_shrinks_monotonically(k1, k2, rho, g1, g2):
    # the gap is hump-shaped in R_A (scalar case peaks at R_A = k^2 / sqrt 2), so the
    # geometric sequence starts inside the small-risk-aversion regime
    start = 0.1 * min(k1, k2) ** 2 / (1 + abs(rho))

    def gap(ra):
        sol = lq.solve(LQParams(k1=k1, k2=k2, rho=rho, gamma1=g1, gamma2=g2, risk_aversion=ra))
        return np.linalg.norm(sol.nu_star - sol.nu_aggregated)

    gaps = [gap(start * 2.0**-j) for j in range(30)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-8


@given(eff, eff, appetence, appetence, risk)
def test_aggregated_firm_pays_and_gets_more(k1, k2, g1, g2, ra):
    sol = lq.solve(LQParams(k1=k1, k2=k2, gamma1=g1, gamma2=g2, risk_aversion=ra))
    assert sol.delta_a >= sol.delta - 1e-12
    assert np.abs(sol.nu_aggregated).sum() >= np.abs(sol.nu_star).sum() - 1e-12


# correlated components -------------------------------------------------------------


def test_printed_components_disagree_with_matrix_route(frozen):
    out = lq.effort_components_correlated(LQParams())
    assert np.allclose(out.matrix_route, [1 / 3, 1 / 3])
    assert np.allclose(out.printed_route, as_float(frozen["printed_symmetric"]))
    assert out.discrepancy == pytest.approx(3 / 7 - 1 / 3)


@given(eff, eff, corr, appetence, appetence)
def test_components_agree_when_risk_neutral(k1, k2, rho, g1, g2):
    out = lq.effort_components_correlated(
        LQParams(k1=k1, k2=k2, rho=rho, gamma1=g1, gamma2=g2, risk_aversion=0.0))
    assert out.discrepancy <= 1e-12 * (1 + np.abs(out.matrix_route).max())


@given(eff, corr, appetence, risk)
def test_components_symmetric_under_swap(k, rho, g, ra):
    out = lq.effort_components_correlated(
        LQParams(k1=k, k2=k, rho=rho, gamma1=g, gamma2=g, risk_aversion=ra))
    for route in (out.matrix_route, out.printed_route):
        assert route[0] == pytest.approx(route[1], rel=1e-12)


def test_components_reject_explicit_sigma():
    with pytest.raises(ValueError):
        lq.effort_components_correlated(LQParams(sigma=np.eye(2)))


# proportion gap and dominance -------------------------------------------------------


def test_proportion_gap_examples(frozen):
    p = LQParams(gamma1=0.5, gamma2=0.0)
    assert lq.proportion_gap(0.5, p) == pytest.approx(1.0)
    assert lq.proportion_gap(0.5, p) == pytest.approx(frozen["proportion_gap_eigen"])
    assert lq.proportion_gap(0.0, LQParams(k1=2, k2=2, gamma1=0.7, gamma2=0.2, risk_aversion=3)) == \
        pytest.approx(0.5)
    for rho in np.linspace(-1, 0.9, 7):
        assert lq.proportion_gap(rho, LQParams(gamma1=0.3, gamma2=0.3)) == 0.0
    with pytest.raises(ValueError):
        lq.proportion_gap(1.0, p)
    with pytest.raises(ValueError):
        lq.proportion_gap(0.0, LQParams(k1=1, k2=2))


@given(st.floats(0.3, 3), corr, appetence, appetence, risk)
def test_proportion_gap_matches_matrix_route(k, rho, g1, g2, ra):
    p = LQParams(k1=k, k2=k, rho=rho, gamma1=g1, gamma2=g2, risk_aversion=ra)
    assert lq.proportion_gap(rho, p) == pytest.approx(lq.proportion_gap_matrix(p), abs=1e-12)


@given(st.floats(0.3, 3), st.floats(0.05, 1), st.floats(0.05, 5))
def test_proportion_gap_increasing_and_convex(k, diff, ra):
    p = LQParams(k1=k, k2=k, gamma1=diff, gamma2=0.0, risk_aversion=ra)
    rhos = np.linspace(-1, 0.99, 100)
    d = np.array([lq.proportion_gap(r, p) for r in rhos])
    assert np.all(np.diff(d) > 0)
    assert np.all(np.diff(d, 2) >= -1e-9)


@given(st.floats(0.3, 3), corr, appetence, appetence, risk)
def test_more_effort_for_more_ambitious_principal(k, rho, g1, g2, ra):
    assume(abs(g1 - g2) > 1e-6)
    nu = lq.solve(LQParams(k1=k, k2=k, rho=rho, gamma1=g1, gamma2=g2, risk_aversion=ra)).nu_star
    assert np.sign(nu[0] - nu[1]) == np.sign(g1 - g2)


@given(eff, eff, corr, appetence, appetence, risk, st.floats(0.01, 100))
def test_effort_ranking_invariant_to_scaling_gamma(k1, k2, rho, g1, g2, ra, c):
    p = LQParams(k1=k1, k2=k2, rho=rho, gamma1=g1, gamma2=g2, risk_aversion=ra)
    sol = lq.solve(p)
    scaled = p.K @ sol.M @ (c * p.Gamma)
    assert np.allclose(scaled, c * sol.nu_star, rtol=1e-12, atol=1e-12)
    assume(abs(sol.nu_star[0] - sol.nu_star[1]) > 1e-9)
    assert np.argmax(scaled) == np.argmax(sol.nu_star)


def test_dominance_examples():
    works, thr = lq.dominance_condition(LQParams(k1=2, k2=1, gamma1=0.3, gamma2=0.3, risk_aversion=0))
    assert works and thr == pytest.approx(1.0)
    for k1, k2 in ((100.0, 0.01), (1.0, 1.0), (0.5, 3.0)):
        works, thr = lq.dominance_condition(LQParams(k1=k1, k2=k2, gamma1=0, gamma2=1, risk_aversion=0))
        assert not works and math.isinf(thr)
    g = dict(gamma1=1 / 3, gamma2=2 / 3, risk_aversion=0)
    works, thr = lq.dominance_condition(LQParams(k1=3, k2=1, **g))
    assert works and thr == pytest.approx(2.0)
    assert not lq.dominance_condition(LQParams(k1=1.9, k2=1, **g))[0]


def test_dominance_preconditions():
    with pytest.raises(ValueError):
        lq.dominance_condition(LQParams(risk_aversion=1.0))
    with pytest.raises(ValueError):
        lq.dominance_condition(LQParams(rho=0.5, risk_aversion=0.0))


@given(eff, eff, appetence, appetence)
def test_dominance_agrees_with_efforts(k1, k2, g1, g2):
    p = LQParams(k1=k1, k2=k2, gamma1=g1, gamma2=g2, risk_aversion=0.0)
    works, thr = lq.dominance_condition(p)
    nu = lq.solve(p).nu_star
    assume(abs(nu[0] - nu[1]) > 1e-9)
    assert works == (nu[0] > nu[1])
    if not math.isinf(thr):
        assert works == (k1 / k2 > thr)


def test_dominance_threshold_increasing_convex():
    x = np.linspace(-1, 0.95, 200)
    f = np.array([lq.dominance_threshold(v) for v in x])
    assert f[0] == 0.0
    assert np.all(np.diff(f) > 0) and np.all(np.diff(f, 2) >= -1e-12)

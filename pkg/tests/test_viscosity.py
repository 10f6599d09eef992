import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppdelab.config import ExperimentConfig
from ppdelab.experiments import heat_solution, sample_points
from ppdelab.lattice import ControlGrid, enumerate_measures
from ppdelab.pathspace import Jet, Path, PathFunctional, SpaceTimePoint, phi_batch
from ppdelab.viscosity import (check_subsolution, check_supersolution, default_jet_grid, finite_difference_jet,
                               g_registry, heat_drift_G, heat_G, jet_grid, jet_test_batch, optimal_stop_point,
                               pucci_operator_G, pucci_plus, residual, rho_estimate, rho_G, subjet_test,
                               superjet_test, value_function_functional, value_function_phi, zero_G)

N, DT = 8, 0.125
ORIGIN = SpaceTimePoint(0, Path.zeros(N, DT))


def _wt(t, p):
    return p[np.arange(len(t)), t, 0]


def time_u():
    return PathFunctional(lambda t, p, dt: t * dt, "t")


def pts(n=6, seed=0):
    return sample_points(ExperimentConfig(n_samples=n, sample_seed=seed))


# --- pucci_plus ------------------------------------------------------------------


def test_pucci_plus_examples():
    assert pucci_plus(np.eye(2)) == 1.0
    assert pucci_plus(-np.eye(2)) == 0.0
    assert pucci_plus([[1.0, 2.0], [2.0, 1.0]]) == pytest.approx(3.0, abs=1e-14)
    with pytest.raises(ValueError):
        pucci_plus([[1.0, 2.0], [0.0, 1.0]])


# --- jet membership ------------------------------------------------------------------


def test_constant_jet_member_for_all_delta():
    u = PathFunctional.constant(1.7)
    for d in (0.05, 0.3, 1.0):
        assert subjet_test(u, ORIGIN, Jet(0, 0, 0), d).member
        assert superjet_test(u, ORIGIN, Jet(0, 0, 0), d).member


def test_time_functional_jets():
    u = time_u()
    assert subjet_test(u, ORIGIN, Jet(1, 0, 0), 0.3).member
    r = subjet_test(u, ORIGIN, Jet(0.9, 0, 0), 0.3)
    # gap = -0.1 * sup E[T ^ h_delta]; the zero path crosses 0.3 at the grid time 0.375
    assert not r.member and r.value_gap == pytest.approx(-0.1 * 0.375, abs=1e-12)
    assert superjet_test(u, ORIGIN, Jet(1, 0, 0), 0.3).member
    r = superjet_test(u, ORIGIN, Jet(1.1, 0, 0), 0.3)
    assert not r.member and r.value_gap > 0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 7), st.sampled_from([0.1, 0.2, 0.3]))
def test_quadratic_identity_jet(seed, delta):
    th = pts(8, seed)[seed]
    if th.t + delta > 1.0:
        delta = 1.0 - th.t
    u = heat_solution()
    jet = Jet(-1.0, 2 * th.omega_t, 2.0)
    for role in ("sub", "super"):
        (r,) = jet_test_batch(u, th, [jet], delta, role)
        assert r.member and abs(r.value_gap) <= 1e-9


@pytest.mark.parametrize("a,b,c", [(0.3, 0.5, 1.2), (-1.0, 0.0, -2.0), (0.0, -0.7, 0.4)])
def test_monomial_jet_at_origin(a, b, c):
    phi = PathFunctional(lambda t, p, dt: phi_batch(Jet(a, b, c), t, p, dt))
    for test in (subjet_test, superjet_test):
        r = test(phi, ORIGIN, Jet(a, b, c), 0.3)
        assert r.member and abs(r.value_gap) <= 1e-9


def test_member_iff_gap_within_tolerance():
    u = heat_solution()
    th = pts()[0]
    for r in jet_test_batch(u, th, default_jet_grid(u, th), 0.1):
        assert r.member == (abs(r.value_gap) <= r.tolerance)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 5))
def test_alpha_monotonicity(eps, i):
    u = heat_solution()
    th = pts()[i]
    c = finite_difference_jet(u, th)
    for j in jet_grid(c, [-0.2, -0.1, 0.0, 0.1], (-0.1, 0.0, 0.1), (-0.1, 0.0, 0.1)):
        if subjet_test(u, th, j, 0.1).member:
            assert subjet_test(u, th, j.shifted(d_alpha=eps), 0.1).member


def test_infeasible_delta_reports_nonmember():
    th = SpaceTimePoint(N, Path.zeros(N, DT))
    assert not subjet_test(time_u(), th, Jet(1, 0, 0), 0.3).member


def test_finite_difference_jet_on_quadratic():
    th = pts()[2]
    j = finite_difference_jet(heat_solution(), th)
    assert j.alpha == pytest.approx(-1.0, abs=1e-12)
    assert j.beta[0] == pytest.approx(2 * th.omega_t[0], abs=1e-12)
    assert j.gamma[0, 0] == pytest.approx(2.0, abs=1e-9)


# --- residual and checks ------------------------------------------------------------------


def test_residual_examples():
    th = pts()[0]
    assert residual(zero_G(), th, 0.0, Jet(0, 1, 1)) == 0.0
    assert residual(zero_G(), th, 0.0, Jet(1, 0, 0)) == -1.0
    assert residual(heat_G(), th, 0.0, Jet(-1, 2 * th.omega_t, 2)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3))
def test_residual_affine_in_alpha(a, b, c, e):
    th = pts()[1]
    G = heat_drift_G(0.7)
    assert residual(G, th, 0.0, Jet(a + e, b, c)) == pytest.approx(residual(G, th, 0.0, Jet(a, b, c)) - e, abs=1e-12)


def test_zero_function_is_subsolution():
    r = check_subsolution(PathFunctional.constant(0.0), zero_G(), pts())
    assert r.passed and r.n_members > 0


def test_heat_solution_passes_both_checks():
    u, G, P = heat_solution(), heat_G(), pts(10)
    sub, sup = check_subsolution(u, G, P), check_supersolution(u, G, P)
    assert sub.passed and sup.passed
    assert sub.worst <= 5 * DT and sup.worst <= 5 * DT


def test_time_decay_violates_subsolution():
    u = PathFunctional(lambda t, p, dt: 2 * (1 - t * dt), "2(T-t)")
    th = pts()[0]
    r = subjet_test(u, th, Jet(-2, 0, 0), 0.1)
    assert r.member
    assert residual(heat_G(), th, u(th), Jet(-2, 0, 0)) == pytest.approx(2.0)
    rep = check_subsolution(u, heat_G(), [th], [Jet(-2, 0, 0)])
    assert not rep.passed and rep.worst == pytest.approx(2.0)


def test_report_rows_and_csv():
    rep = check_subsolution(heat_solution(), heat_G(), pts(3))
    head, rows = rep.csv_rows()
    assert len(rows) == 3 and head[0] == "point"
    assert rep.to_dict()["pass"] is True


# --- G functions --------------------------------------------------------------------------


def test_pucci_operator_examples():
    th = ORIGIN
    G = pucci_operator_G(0.7, 0.2, -0.4, 1.0)
    assert G(th, 0.0, 0.2, -0.4) == pytest.approx(-0.7)
    G0 = pucci_operator_G(0.0, 0.0, 0.0, 1.0)
    assert G0(th, 0.0, 2.0, -1.0) == pytest.approx(-3.0)


@pytest.mark.parametrize("G", [zero_G(), heat_G(), heat_G(0.5), heat_drift_G(1.0),
                               pucci_operator_G(0.3, -0.2, 0.8, 1.0), pucci_operator_G(0.0, 1.0, -1.0, 2.0)])
def test_registered_G_invariants(G):
    rng = np.random.default_rng(1)
    P = pts()
    assert G.lipschitz_violation(P, rng) <= 1e-12
    assert G.ellipticity_violation(P, rng) <= 1e-12
    # the lemma inequality in its L-scaled form
    worst = -np.inf
    for _ in range(200):
        th = P[rng.integers(len(P))]
        b, g, gp = rng.normal(size=1), rng.normal(size=(1, 1)) * 2, rng.normal(size=(1, 1)) * 2
        worst = max(worst, G(th, 0.0, b, g) - G(th, 0.0, b, gp) - G.lipschitz_L * pucci_plus(g - gp))
    assert worst <= 1e-12


def test_g_registry():
    assert g_registry("heat").name.startswith("heat")
    with pytest.raises(ValueError):
        g_registry("nope")


# --- the extremal value function -------------------------------------------------------------


def test_value_function_examples():
    g = ControlGrid.symmetric(1.0, 1 / 3, 3, 2)
    th = SpaceTimePoint(0, Path.zeros(3, 1 / 3))
    assert value_function_phi(PathFunctional.constant(2.0), Jet(0, 0, 0), th, g) == pytest.approx(2.0)
    xi = PathFunctional(lambda t, p, dt: p[:, -1, 0], "w_T")
    v = value_function_phi(xi, Jet(0, 0, 0), th, g)
    assert v == pytest.approx(-1.0, abs=1e-12)
    # oracle: enumerate the no-stopping measures on the drift-only grid
    g0 = ControlGrid(1.0, 1 / 3, [-1.0, 0.0, 1.0], [0.0])
    brute = min(P.expectation(_terminal(xi)) for P in enumerate_measures(g0, 3)
                if all(n.depth == 3 for _, n in P.outcomes()))
    assert brute == pytest.approx(v, abs=1e-12)


def _terminal(xi):
    from ppdelab.expectation import Payoff
    return Payoff(lambda t, p, dt: xi.batch(t, p, dt))


def test_value_function_is_pucci_subsolution():
    cfg = ExperimentConfig(N=6, T=0.75)
    grid = ControlGrid.symmetric(1.0, cfg.dt, 3, 2)
    jet = Jet(0.2, 0.3, -0.5)
    xi = PathFunctional(lambda t, p, dt: np.sin(p[:, -1, 0]), "sin")
    phi = value_function_functional(xi, jet, grid, cfg.N)
    G = pucci_operator_G(0.2, 0.3, -0.5, 1.0)
    P = sample_points(cfg, n=5)
    jets = lambda u, th: jet_grid(finite_difference_jet(u, th), [i * 0.1 for i in range(-4, 5)], (-0.1, 0.0, 0.1))
    r = check_subsolution(phi, G, P, jets, grid=grid, tol_residual=5 * cfg.dt)
    assert r.passed and r.n_members > 0


# --- modulus estimate -------------------------------------------------------------------------


def test_rho_theta_independent_is_zero():
    assert rho_G(heat_G(), 0.5) == 0.0


def test_rho_heat_drift_lower_bound():
    for x in (0.05, 0.2, 0.6):
        assert rho_G(heat_drift_G(1.0), x) >= x * (1 - 0.2)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.001, 2.0), st.floats(0.001, 2.0))
def test_rho_monotone(x1, x2):
    lo, hi = sorted((x1, x2))
    G = heat_drift_G(0.8)
    assert rho_G(G, lo, sample_budget=100) <= rho_G(G, hi, sample_budget=100)


def test_rho_estimate_report():
    r = rho_estimate(heat_drift_G(), 0.3, sample_budget=50)
    assert r.n_pairs == 51 and r.n_within >= 1 and r.to_dict()["x"] == 0.3


# --- optimal stopping point -------------------------------------------------------------------


def test_optimal_stop_point_gives_member_jet():
    u = PathFunctional(lambda t, p, dt: -_wt(t, p) ** 2 + 0.3 * t * dt - 2 * (t * dt) ** 2 + 0.4 * _wt(t, p))
    g = ControlGrid.symmetric(1.0, DT, 3, 2)
    jet = Jet(0.0, 0.4, 0.0)
    # u(0,0) is strictly above the value of stopping at h_delta, so an earlier stop is optimal
    res = optimal_stop_point(u, jet, 0.5, g, N)
    assert res is not None
    th, sj, h = res
    assert th.t_index < h
    assert np.allclose(sj.beta, jet.beta + jet.gamma @ th.omega_t)
    assert subjet_test(u, th, sj, 0.5, grid=g).member


def test_optimal_stop_point_none_when_forced():
    u = PathFunctional(lambda t, p, dt: 0.3 * t * dt - _wt(t, p) ** 2)
    assert optimal_stop_point(u, Jet(0, 0, 0), 0.5, ControlGrid.symmetric(1.0, DT, 3, 2), N) is None

import numpy as np
import pytest

from ppdelab.config import ExperimentConfig
from ppdelab.experiments import (affine_minorants, comparison_study, heat_reference, heat_reference_functional,
                                 heat_solution, hilbert_suite, perron_envelope, sample_points, stability_experiment,
                                 stability_probe, terminal_functional, viscosity_verify)
from ppdelab.expectation import Payoff
from ppdelab.lattice import Budget, ControlGrid, enumerate_measures
from ppdelab.pathspace import Jet, Path, PathFunctional, SpaceTimePoint
from ppdelab.regularization import PointSet, reference_tree_points
from ppdelab.viscosity import heat_G, zero_G


def _wt(t, p):
    return p[np.arange(len(t)), t, 0]


def _enumerated_terminal(xi, c, theta):
    """E[xi] over the single no-stopping measure of the driftless tree, found by enumeration."""
    g = ControlGrid(c, theta.dt, [0.0], [c])
    N = theta.N - theta.t_index
    f = Payoff(lambda t, p, dt: xi.batch(t, p, dt))
    vals = [P.expectation(f) for P in enumerate_measures(g, N, budget=Budget(max_enum_steps=N))
            if all(n.depth == N for _, n in P.outcomes())]
    assert len(vals) == 1
    return vals[0]


# --- heat reference ---------------------------------------------------------------------------


@pytest.mark.parametrize("t", [0, 1, 3])
def test_heat_reference_linear_and_square(t):
    dt = 0.25
    w = Path([0.0, 0.5, 0.0, -0.5, 0.25], dt)
    th = SpaceTimePoint(t, w)
    lin, sq = terminal_functional("linear"), terminal_functional("square")
    assert heat_reference(lin, 1.0, th) == pytest.approx(th.omega_t[0], abs=1e-12)
    assert heat_reference(sq, 1.0, th) == pytest.approx(th.omega_t[0] ** 2 + (1 - th.t), abs=1e-12)
    assert heat_reference(terminal_functional("const"), 1.0, th) == 1.0


def test_heat_reference_matches_enumeration_at_origin():
    N, dt = 4, 0.25
    th = SpaceTimePoint(0, Path.zeros(N, dt))
    for name, want in (("linear", 0.0), ("square", 1.0)):
        xi = terminal_functional(name)
        assert _enumerated_terminal(xi, 1.0, th) == pytest.approx(want, abs=1e-12)
        assert heat_reference(xi, 1.0, th) == pytest.approx(want, abs=1e-12)


def test_heat_reference_tower_identity():
    N, dt, c = 6, 1 / 6, 1.0
    xi = terminal_functional("bounded")
    ref = heat_reference_functional(xi, c, N, dt)
    S = reference_tree_points(ControlGrid(c, dt, [0.0], [c]), N)
    vals = S.evaluate(ref)
    step = np.sqrt(c * dt)
    worst = 0.0
    for i in np.nonzero(S.t_idx < N)[0]:
        k = S.t_idx[i]
        kids = []
        for s in (step, -step):
            p = S.paths[i].copy()
            p[k + 1:] += s
            kids.append(ref(SpaceTimePoint(k + 1, Path(p, dt))))
        worst = max(worst, abs(vals[i] - 0.5 * sum(kids)))
    assert worst <= 1e-12


def test_heat_reference_rejects_bad_rate():
    with pytest.raises(ValueError):
        heat_reference_functional(terminal_functional("linear"), 0.0, 4, 0.25)
    with pytest.raises(ValueError):
        terminal_functional("nope")


# --- verification -----------------------------------------------------------------------------------


def test_verify_heat_and_constant():
    cfg = ExperimentConfig()
    assert viscosity_verify(heat_solution(), heat_G(), cfg).passed
    assert viscosity_verify(PathFunctional.constant(0.7), zero_G(), cfg).passed


def test_sample_points_seeded_and_interior():
    cfg = ExperimentConfig(N=12)
    a, b = sample_points(cfg), sample_points(cfg)
    assert all(x == y for x, y in zip(a, b))
    assert all(1 <= p.t_index and p.t + min(cfg.delta_grid) <= cfg.T + 1e-12 for p in a)
    step = np.sqrt(cfg.L * cfg.dt)
    for p in a:
        inc = np.diff(p.path.values[: p.t_index + 1, 0]) / step
        assert np.allclose(inc, np.round(inc), atol=1e-12) and np.all(np.abs(np.round(inc)) <= 1)


def test_perturbed_solution_rejected_on_fine_grid():
    # u + 0.5 (T - t) has residual +0.5 on every member jet: a strict supersolution, never a subsolution
    cfg = ExperimentConfig(N=12)
    rep = viscosity_verify(heat_solution(c=1.5), heat_G(), cfg)
    assert not rep.sub.passed and rep.sub.worst == pytest.approx(0.5, abs=1e-9)
    assert rep.sup.worst == pytest.approx(-0.5, abs=1e-9)


# --- Perron envelope -------------------------------------------------------------------------------------


def test_perron_singleton():
    cfg = ExperimentConfig()
    P = sample_points(cfg, 4)
    (f,) = affine_minorants([0.3])
    env, rep = perron_envelope([f], P, heat_G(), cfg=cfg)
    S = PointSet.from_points(P)
    assert np.array_equal(S.evaluate(env), S.evaluate(f))
    assert rep.passed


def test_perron_two_members_pointwise_max():
    cfg = ExperimentConfig()
    P = sample_points(cfg, 10, seed=4)
    fam = affine_minorants([-0.5, 0.5])
    env, rep = perron_envelope(fam, P, heat_G(), upper=heat_solution(), cfg=cfg)
    S = PointSet.from_points(P)
    a, b = S.evaluate(fam[0]), S.evaluate(fam[1])
    assert np.array_equal(S.evaluate(env), np.maximum(a, b))
    assert np.any(a > b) and np.any(b > a)
    assert rep.dominates_members and rep.below_upper and rep.sub.passed


def test_perron_empty_family():
    with pytest.raises(ValueError):
        perron_envelope([], sample_points(ExperimentConfig(), 2), heat_G())


# --- stability ------------------------------------------------------------------------------------------


def _probe(seq):
    cfg = ExperimentConfig()
    th = sample_points(cfg)[3]
    u = heat_solution()
    jet = Jet(-1.0, 2 * th.omega_t, 2.0)
    return stability_probe(seq, [heat_G()] * len(seq), th, jet, u, heat_G(), cfg, labels=[1, 2, 4, 8][: len(seq)])


def test_stability_constant_sequence():
    rep = _probe([heat_solution()] * 3)
    assert rep.passed
    assert all(tr["found"] and tr["gap"] <= 1e-12 for tr in rep.traces)


def test_stability_shifted_sequence():
    u = heat_solution()
    seq = [PathFunctional(lambda t, p, dt, n=n: u.batch(t, p, dt) + 1.0 / n) for n in (1, 2, 4, 8)]
    rep = _probe(seq)
    for tr, n in zip(rep.traces, (1, 2, 4, 8)):
        assert tr["alpha_n"] == -1.0 and tr["gap"] == pytest.approx(1.0 / n, abs=1e-12)


def test_stability_experiment_heat_family():
    cfg = ExperimentConfig()
    rep = stability_experiment(cfg)
    assert rep.passed
    for tr in rep.traces:
        assert tr["found"] and tr["gap"] <= 2.0 / tr["n"]


def test_stability_reports_search_failure():
    # a functional with a jump right after the point has no member near the limit jet
    cfg = ExperimentConfig()
    th = sample_points(cfg)[3]
    spike = PathFunctional(lambda t, p, dt: np.where(t > th.t_index, 1e3, 0.0))
    rep = stability_probe([spike], [heat_G()], th, Jet(-1.0, 0.0, 0.0), heat_solution(), heat_G(), cfg)
    assert rep.failures == 1 and not rep.passed and rep.traces[0]["found"] is False


# --- comparison and hilbert suites ----------------------------------------------------------------------


def test_comparison_study_small():
    rep = comparison_study(ExperimentConfig(N=4))
    assert rep.passed and rep.min_gap == pytest.approx(0.2, abs=1e-12)


@pytest.mark.parametrize("name", ["resolvent", "semigroup", "bnorm", "conv"])
def test_hilbert_suites_pass(name):
    out = hilbert_suite(name, refinements=3)
    assert out["records"] and all(r[3] for r in out["records"]), out["records"]
    with pytest.raises(ValueError):
        hilbert_suite("nope")

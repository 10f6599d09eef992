import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppdelab.expectation import Payoff
from ppdelab.lattice import (Budget, BudgetExceeded, ControlGrid, concat_measure, count_measures,
                             enumerate_expectations, enumerate_measures, measure_from_rule, point_mass,
                             sample_scenario, sample_scenarios, tower_expectation)


def wt_payoff():
    return Payoff(lambda t, p, dt: p[np.arange(len(t)), t, 0], name="w")


def mixed_payoff(a=0.7, b=-0.3, c=0.4):
    return Payoff(lambda t, p, dt: a * p[np.arange(len(t)), t, 0] + b * t * dt
                  + c * np.max(p[:, :, 0], axis=1), name="mixed")


# --- grids ---------------------------------------------------------------------


def test_empty_grids_rejected():
    with pytest.raises(ValueError):
        ControlGrid(1.0, 0.1, [0.0], [])
    with pytest.raises(ValueError):
        ControlGrid(1.0, 0.1, [], [0.0])


def test_grid_bounds_enforced():
    with pytest.raises(ValueError):
        ControlGrid(1.0, 0.1, [1.5], [0.0])
    with pytest.raises(ValueError):
        ControlGrid(1.0, 0.1, [0.0], [2.0])
    with pytest.raises(ValueError):
        ControlGrid(1.0, 0.1, [0.0], [-0.5])


def test_binomial_branches_match_variance():
    g = ControlGrid(1.0, 0.25, [0.0], [0.5])
    (br,) = [g.branches(ci) for ci in range(len(g.controls))]
    probs = np.array([b[0] for b in br])
    dM = np.array([b[2] for b in br])[:, 0]
    assert probs.sum() == 1.0
    assert abs(probs @ dM) == 0.0
    assert probs @ dM ** 2 == pytest.approx(0.5 * 0.25, abs=1e-15)


def test_trinomial_branches_match_variance():
    g = ControlGrid(1.0, 0.25, [0.0], [0.8], branching="trinomial")
    for ci in range(len(g.controls)):
        br = g.branches(ci)
        probs = np.array([b[0] for b in br])
        dM = np.array([b[2] for b in br])[:, 0]
        assert probs.sum() == pytest.approx(1.0, abs=1e-15)
        assert probs @ dM == pytest.approx(0.0, abs=1e-15)
        assert probs @ dM ** 2 == pytest.approx(0.8 * 0.25, abs=1e-15)


# --- enumeration --------------------------------------------------------------------


def test_enumeration_counts_examples():
    assert len(list(enumerate_measures(ControlGrid(1.0, 1.0, [0.0], [0.0]), 1))) == 2
    assert len(list(enumerate_measures(ControlGrid(1.0, 1.0, [-1.0, 0.0, 1.0], [0.0]), 1))) == 4


@pytest.mark.parametrize("N", [1, 2])
def test_enumeration_matches_count_and_validates(N):
    g = ControlGrid(1.0, 0.5, [-1.0, 1.0], [0.0, 1.0])
    ms = list(enumerate_measures(g, N))
    assert len(ms) == count_measures(g, N)
    for P in ms:
        assert P.validate()


def test_vectorized_enumeration_matches_explicit_measures():
    g = ControlGrid(1.0, 0.5, [-1.0, 0.0, 1.0], [0.0, 1.0])
    f = mixed_payoff()
    fast = enumerate_expectations(f, g, 2)
    slow = np.array([P.expectation(f) for P in enumerate_measures(g, 2)])
    assert np.max(np.abs(fast - slow)) <= 1e-12


def test_enumeration_budget():
    g = ControlGrid(1.0, 0.2, [0.0], [0.0])
    with pytest.raises(BudgetExceeded):
        next(iter(enumerate_measures(g, 5)))
    assert len(enumerate_expectations(wt_payoff(), g, 5, budget=Budget(max_enum_steps=5))) == count_measures(g, 5)


def test_budget_from_env(monkeypatch):
    monkeypatch.setenv("PPDE_BUDGET", "10")
    assert Budget.from_env().max_nodes == 10
    monkeypatch.setenv("PPDE_BUDGET", "lots")
    with pytest.raises(BudgetExceeded):
        Budget.from_env()


def test_grid_budget_message():
    with pytest.raises(BudgetExceeded, match="budget exceeded"):
        Budget().check_grid(40, 3, 2)


# --- explicit measures ------------------------------------------------------------------


rules = st.lists(st.tuples(st.sampled_from([0.0, 0.25, 1.0]), st.integers(0, 5)), min_size=64, max_size=64)


@settings(max_examples=30, deadline=None)
@given(rules)
def test_random_rule_measures_satisfy_invariants(choices):
    g = ControlGrid(1.0, 0.25, [-1.0, 0.0, 1.0], [0.0, 1.0])
    it = iter(choices)

    def rule(node):
        s, c = next(it, (1.0, 0))
        return s, c % len(g.controls)

    P = measure_from_rule(g, 3, rule)
    assert P.validate()
    assert sum(p for p, _ in P.outcomes()) == pytest.approx(1.0, abs=1e-12)
    for node in P.nodes():
        assert np.allclose(node.prefix_b, node.prefix_a + node.prefix_m, atol=1e-15, rtol=0)


def test_validate_catches_broken_martingale():
    g = ControlGrid(1.0, 0.25, [0.0], [1.0])
    P = measure_from_rule(g, 1, lambda n: (0.0, 0))
    p, kid = P.root.children[0]
    P.root.children[0] = (p, P.root.child(p, np.zeros(1), kid.prefix_m[-1] * 2, np.eye(1) * 0.25))
    with pytest.raises(ValueError):
        P.validate()


def test_point_mass_and_json():
    g = ControlGrid(1.0, 0.25, [0.0], [1.0])
    P = point_mass(g, 2)
    assert P.validate() and P.expectation(wt_payoff()) == 0.0
    Q = measure_from_rule(g, 2, lambda n: (0.0, 0))
    obj = json.loads(Q.to_json())
    assert len(obj["nodes"]) == 7 and obj["depth_max"] == 2


# --- concatenation -------------------------------------------------------------------------


def _drift_grid():
    return ControlGrid(1.0, 0.5, [-1.0, 0.0, 1.0], [0.0, 1.0])


def _P(g, N=2):
    return measure_from_rule(g, N, lambda n: (0.25 if n.depth == 1 else 0.0, (n.depth + 3) % len(g.controls)))


def test_concat_with_immediate_stop_is_stopped_measure():
    g = _drift_grid()
    P = _P(g)
    f = mixed_payoff()
    C = concat_measure(P, lambda n: n.depth == 1, lambda n: point_mass(g, 0))
    assert C.validate()
    stopped = measure_from_rule(g, 2, lambda n: (1.0, 0) if n.depth == 1 else (0.0, (n.depth + 3) % len(g.controls)))
    assert C.expectation(f) == pytest.approx(stopped.expectation(f), abs=1e-12)


def test_concat_at_root_is_continuation():
    g = _drift_grid()
    P = _P(g)
    nu = measure_from_rule(g, 2, lambda n: (0.0, 5))
    C = concat_measure(P, lambda n: n.depth == 0, lambda n: nu)
    assert C.expectation(mixed_payoff()) == pytest.approx(nu.expectation(mixed_payoff()), abs=1e-15)


def test_concat_tower_identity_depth_two():
    g = _drift_grid()
    P = _P(g)
    up = g.controls.index((2, 0))  # drift +L, no variance
    nu = lambda n: measure_from_rule(g, 1, lambda m: (0.0, up))
    tau = lambda n: n.depth == 1
    f = mixed_payoff()
    C = concat_measure(P, tau, nu)
    assert C.validate()
    assert abs(C.expectation(f) - tower_expectation(P, tau, nu, f)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5), st.integers(0, 5), st.sampled_from([0.0, 0.5]))
def test_concat_tower_identity_property(c1, c2, s):
    g = _drift_grid()
    P = measure_from_rule(g, 3, lambda n: (s if n.depth == 2 else 0.0, c1))
    nu = lambda n: measure_from_rule(g, 3 - n.depth, lambda m: (0.0, (c2 + m.depth) % 6))
    tau = lambda n: n.depth == 1 and n.prefix_b[-1, 0] >= 0
    f = mixed_payoff(-0.2, 0.9, 1.1)
    C = concat_measure(P, tau, nu)
    assert C.validate()
    assert abs(C.expectation(f) - tower_expectation(P, tau, nu, f)) <= 1e-12


def test_concat_horizon_overflow():
    g = _drift_grid()
    with pytest.raises(ValueError, match="horizon overflow"):
        concat_measure(_P(g), lambda n: n.depth == 1, lambda n: measure_from_rule(g, 2, lambda m: (0.0, 0)))


def test_concat_grid_mismatch():
    g = _drift_grid()
    other = ControlGrid(1.0, 0.25, [0.0], [0.0])
    with pytest.raises(ValueError):
        concat_measure(_P(g), lambda n: n.depth == 1, lambda n: point_mass(other, 0))


# --- sampling ----------------------------------------------------------------------------------


def test_sample_point_mass():
    g = ControlGrid(1.0, 0.25, [0.0], [1.0])
    for seed in range(3):
        k, B, A, M, Q = sample_scenario(point_mass(g, 2), seed)
        assert k == 0 and not B.any() and not M.any()


def test_sampling_is_seeded():
    P = _P(_drift_grid())
    a, b = sample_scenarios(P, 50, 7), sample_scenarios(P, 50, 7)
    assert np.array_equal(a.B, b.B) and np.array_equal(a.stop_index, b.stop_index)
    assert a.to_csv() == b.to_csv()


def test_sample_martingale_mean_and_stop_time():
    g = ControlGrid(1.0, 0.25, [-1.0, 0.0, 1.0], [0.0, 1.0])
    P = measure_from_rule(g, 4, lambda n: (0.3 if n.depth == 2 else 0.0, (n.depth * 2 + 1) % len(g.controls)))
    s = sample_scenarios(P, 100_000, 0)
    MT = s.M[:, -1, 0]
    # exact variance of M_T from the tree
    var = sum(p * float(n.prefix_m[-1, 0]) ** 2 for p, n in P.outcomes())
    assert abs(MT.mean()) <= 3 * math.sqrt(var / len(s))
    assert abs(s.stop_index.mean() * g.dt - P.stop_time_mean()) <= 1e-2

"""Acceptance criteria, one test per criterion, each printing a single PASS/FAIL line.

Run standalone with ``python3 tests/test_acceptance.py`` or through pytest, where the
lines are repeated in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from ppdelab.config import ExperimentConfig
from ppdelab.expectation import Payoff, dpp_check, inf_expectation, pure_stopping_sup, sup_expectation
from ppdelab.experiments import (comparison_study, heat_solution, hilbert_suite, sample_points,
                                 stability_experiment, viscosity_verify)
from ppdelab.hilbert import alternating_pair_family, conv_continuity_experiment
from ppdelab.lattice import ControlGrid, enumerate_expectations
from ppdelab.pathspace import Jet, Path, PathFunctional, SpaceTimePoint, phi_batch
from ppdelab.regularization import (lipschitz_excess, reference_tree_points, residual_bound_check, sup_convolution,
                                    terminal_consistency_check, terminal_lipschitz_constant)
from ppdelab.viscosity import heat_drift_G, heat_G, jet_test_batch

RESULTS = {}


def report(k, ok, detail):
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[k] = line
    print(line)
    assert ok, line


def _wt(t, p):
    return p[np.arange(len(t)), t, 0]


def random_payoff(rng):
    """Polynomial in w_t, t, the running max and the running min, with random coefficients."""
    c = rng.uniform(-2, 2, size=6)

    def f(t, p, dt):
        w = _wt(t, p)
        live = np.arange(p.shape[1])[None] <= t[:, None]
        hi = np.max(np.where(live, p[:, :, 0], -np.inf), axis=1)
        lo = np.min(np.where(live, p[:, :, 0], np.inf), axis=1)
        return c[0] + c[1] * w + c[2] * w * w + c[3] * t * dt + c[4] * hi + c[5] * lo * w

    return Payoff(f, name="rand")


# --- 1 ------------------------------------------------------------------------------------------


def test_criterion_01_dpp():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    g4 = ControlGrid.symmetric(1.0, 0.25, 3, 2)
    g3 = ControlGrid.symmetric(1.0, 1 / 3, 3, 2)
    dpp, enum = 0.0, 0.0
    for i in range(20):
        f = random_payoff(rng)
        r = dpp_check(f, g4, 4, int(rng.integers(0, 5)))
        dpp = max(dpp, r.gap, r.as_gap)
        vals = enumerate_expectations(f, g3, 3)
        enum = max(enum, abs(vals.max() - sup_expectation(f, g3, 3)[0]),
                   abs(vals.min() - inf_expectation(f, g3, 3)[0]))
    took = time.perf_counter() - start
    report(1, dpp <= 1e-12 and enum <= 1e-12 and took < 30,
           f"max DPP gap {dpp:.2e}, DP vs enumeration {enum:.2e} (tol 1e-12), {took:.1f} s (< 30 s)")


# --- 2 ------------------------------------------------------------------------------------------


def test_criterion_02_randomized_equals_pure():
    rng = np.random.default_rng(202)
    worst = 0.0
    for i in range(20):
        N = 3 + i % 2
        g = ControlGrid.symmetric(1.0, 1.0 / N, 3, 2)
        f = random_payoff(rng)
        worst = max(worst, abs(sup_expectation(f, g, N)[0] - pure_stopping_sup(f, g, N)))
    report(2, worst <= 1e-12, f"max |randomized - pure| {worst:.2e} over 20 instances, N in {{3, 4}} (tol 1e-12)")


# --- 3 ------------------------------------------------------------------------------------------


def test_criterion_03_sublinearity():
    rng = np.random.default_rng(303)
    g = ControlGrid.symmetric(1.0, 1 / 3, 3, 2)
    E = lambda h: sup_expectation(h, g, 3)[0]
    Ei = lambda h: inf_expectation(h, g, 3)[0]
    worst = {"monotone": 0.0, "shift": 0.0, "subadditive": 0.0, "duality": 0.0}
    for _ in range(50):
        f, h = random_payoff(rng), random_payoff(rng)
        c = float(rng.uniform(-3, 3))
        big = Payoff(lambda t, p, dt, f=f, h=h: np.maximum(f.batch(t, p, dt), h.batch(t, p, dt)))
        worst["monotone"] = max(worst["monotone"], E(f) - E(big))
        worst["shift"] = max(worst["shift"], abs(E(f + c) - E(f) - c))
        worst["subadditive"] = max(worst["subadditive"], E(f + h) - E(f) - E(h))
        worst["duality"] = max(worst["duality"], abs(Ei(f) + E(-f)))
    ok = all(v <= 1e-12 for v in worst.values())
    report(3, ok, ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + " over 50 pairs (tol 1e-12)")


# --- 4 ------------------------------------------------------------------------------------------


def test_criterion_04_jet_analytics():
    N, dt, delta = 8, 0.125, 0.3
    theta = SpaceTimePoint(0, Path.zeros(N, dt))
    # sup E[T ^ h_delta] is the hitting time of the still path: the first grid time >= delta
    hit = math.ceil(delta / dt - 1e-12) * dt
    worst_eq, signs_ok, members_ok = 0.0, True, True
    for a, b, c in [(0.3, 0.5, 1.2), (-1.0, 0.0, -2.0), (0.0, -0.7, 0.4), (1.0, 2.0, 3.0)]:
        u = PathFunctional(lambda t, p, d, j=Jet(a, b, c): phi_batch(j, t, p, d))
        eq, low = jet_test_batch(u, theta, [Jet(a, b, c), Jet(a - 0.1, b, c)], delta, "sub")
        worst_eq = max(worst_eq, abs(eq.value_gap))
        members_ok &= eq.member and not low.member
        signs_ok &= low.value_gap < 0 and abs(low.value_gap + 0.1 * hit) <= 1e-9
        eqs, high = jet_test_batch(u, theta, [Jet(a, b, c), Jet(a + 0.1, b, c)], delta, "super")
        worst_eq = max(worst_eq, abs(eqs.value_gap))
        members_ok &= eqs.member and not high.member
        signs_ok &= high.value_gap > 0 and abs(high.value_gap - 0.1 * hit) <= 1e-9
    report(4, members_ok and signs_ok and worst_eq <= 1e-9,
           f"members/non-members as expected: {members_ok}, off-jet gaps = -/+0.1*{hit:g}: {signs_ok}, "
           f"equality gaps {worst_eq:.2e} (tol 1e-9)")


# --- 5 ------------------------------------------------------------------------------------------


def test_criterion_05_heat_verification():
    cfg = ExperimentConfig()
    tol = 5 * cfg.dt
    good = viscosity_verify(heat_solution(), heat_G(), cfg)
    bad = viscosity_verify(heat_solution(c=1.5), heat_G(), cfg)
    ok = good.passed and good.sub.worst <= tol and good.sup.worst <= tol and not bad.sup.passed
    report(5, ok, f"solution: sub worst {good.sub.worst:.2e}, super worst {good.sup.worst:.2e} (tol {tol:g}); "
                  f"u + 0.5(T-t): super check {'fails' if not bad.sup.passed else 'passes'} "
                  f"(worst {bad.sup.worst:+.3f}), sub check worst {bad.sub.worst:+.3f}")


def test_criterion_05_perturbation_rejected_by_subsolution_check():
    # Supplement: the perturbation adds +0.5 to every residual, so it is caught by the
    # subsolution check once the tolerance 5 dt drops below 0.5.
    cfg = ExperimentConfig(N=12)
    bad = viscosity_verify(heat_solution(c=1.5), heat_G(), cfg)
    good = viscosity_verify(heat_solution(), heat_G(), cfg)
    assert good.passed
    assert not bad.sub.passed and bad.sub.worst == pytest.approx(0.5, abs=1e-9)


# --- 6 ------------------------------------------------------------------------------------------


def test_criterion_06_sup_convolution():
    cfg = ExperimentConfig()
    N, dt, T, eps = cfg.N, cfg.dt, cfg.T, 1.0
    S = reference_tree_points(ControlGrid(cfg.L, dt, [0.0], [0.0, cfg.L]), N)
    u = PathFunctional(lambda t, p, d: _wt(t, p) ** 2 + (T - t * d) + eps * _wt(t, p) * (T - t * d), "u")
    uS = S.evaluate(u)
    above, lip = True, -math.inf
    for n in (1.0, 5.0, 20.0):
        res = sup_convolution(uS, n, S)
        above &= bool(np.all(res.values >= uS))
        lip = max(lip, lipschitz_excess(res))
    lin = PathFunctional(lambda t, p, d: 0.5 * _wt(t, p) + 0.3 * t * d)
    fixed = bool(np.array_equal(sup_convolution(lin, 1.0, S).values, S.evaluate(lin)))
    C0 = terminal_lipschitz_constant(uS, S)
    thr = terminal_consistency_check(uS, C0, 1.0, S).threshold
    term = terminal_consistency_check(uS, C0, thr, S)
    G, C = heat_drift_G(eps), float(np.max(np.abs(uS)))
    pts = sample_points(cfg)
    reps = [residual_bound_check(u, G, C, n, S, pts, grid=ControlGrid(cfg.L, dt, [0.0], [0.0, cfg.L]))
            for n in (5, 10, 20)]
    bounds = [r.bound for r in reps]
    within = all(r.passed for r in reps)
    decreasing = all(bounds[i + 1] < bounds[i] for i in range(2))
    ok = above and lip <= 1e-12 and fixed and term.passed and within and decreasing
    report(6, ok, f"u^n >= u: {above}; Lipschitz excess {lip:.2e}; fixed point exact: {fixed}; "
                  f"terminal consistency at n = {thr:.3g}: {term.passed}; residual worst/bound "
                  + ", ".join(f"n={int(r.n)}: {r.worst:.3f}/{r.bound:.3f}" for r in reps)
                  + f"; bound decreasing: {decreasing}")


# --- 7 ------------------------------------------------------------------------------------------


def test_criterion_07_comparison():
    cfg = ExperimentConfig()
    start = time.perf_counter()
    rep = comparison_study(cfg)
    took = time.perf_counter() - start
    gaps = [t["min_gap"] for t in rep.traces]
    ok = rep.terminal_ordered and min(gaps) >= -5 * cfg.dt and took < 120
    report(7, ok, f"min(v~n - u~n) over n = {list(cfg.n_ladder)}: {min(gaps):.4f} (>= {-5 * cfg.dt:g}), "
                  f"terminal ordered: {rep.terminal_ordered}, {took:.1f} s (< 120 s)")


# --- 8 ------------------------------------------------------------------------------------------


def test_criterion_08_hilbert():
    recs = []
    for name in ("bnorm", "resolvent", "semigroup", "conv"):
        recs += [r for r in hilbert_suite(name, refinements=3)["records"]
                 if not r[0].startswith(("smooth", "step"))]
    bad = [r[0] for r in recs if not r[3]]
    factors = [f"{r[1]:.2f}" for r in recs if r[0].startswith("halving")]
    bn = max(r[1] for r in recs if r[0].startswith("b_norm"))
    report(8, not bad, f"|(1,0)|_B error {bn:.1e} (tol 1e-6); resolvent halving factors {factors} (4 +- 0.5); "
                       f"semigroup exact; conv t^2/2; failing records: {bad or 'none'}")


# --- 9 ------------------------------------------------------------------------------------------


def test_criterion_09_conv_characterization():
    fam = alternating_pair_family(levels=4)
    smooth = conv_continuity_experiment(np.cos, fam)
    step = conv_continuity_experiment(lambda r: (r <= 0.5).astype(float), fam)
    ok = smooth.spread <= 2.0 and all(g >= 1.5 for g in step.growth)
    report(9, ok, f"smooth max/min ratio {smooth.spread:.3f} (<= 2); step growth "
                  f"{[round(g, 3) for g in step.growth]} (>= 1.5 each)")


# --- 10 -----------------------------------------------------------------------------------------


def test_criterion_10_stability():
    cfg = ExperimentConfig()
    rep = stability_experiment(cfg)
    gaps = {tr["n"]: tr.get("gap") for tr in rep.traces}
    ok = (rep.failures == 0 and all(gaps[n] <= 2.0 / n for n in gaps) and rep.limit_residual <= 5 * cfg.dt
          and sorted(gaps) == [2, 4, 8, 16])
    report(10, ok, "trace gaps " + ", ".join(f"n={n}: {g:.4f} (<= {2 / n:.3f})" for n, g in gaps.items())
                   + f"; limit residual {rep.limit_residual:+.4f} (<= {5 * cfg.dt:g})")


if __name__ == "__main__":
    import sys
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_") and callable(v)]
    failed = 0
    for fn in tests:
        try:
            fn()
        except AssertionError as exc:
            failed += 1
            if not str(exc).startswith("criterion"):
                print(f"{fn.__name__}: FAIL  {exc}")
    sys.exit(1 if failed else 0)

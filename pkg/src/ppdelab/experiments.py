"""End-to-end demonstrations assembled from the lattice, viscosity and regularization modules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .config import ExperimentConfig
from .expectation import terminal_expectation_batch
from .hilbert import (HilbertPoint, alternating_pair_family, b_norm, conv_continuity_experiment, conv_functional,
                      roundtrip_error, semigroup_apply)
from .lattice import ControlGrid
from .pathspace import Jet, Path, PathFunctional, SpaceTimePoint, d_infty
from .regularization import PointSet, comparison_pipeline, reference_tree_points
from .viscosity import (GFunction, check_subsolution, check_supersolution, default_jet_grid, g_registry,
                        heat_G, jet_test_batch, residual)

__all__ = [
    "terminal_functional", "heat_reference", "heat_reference_functional", "sample_points", "VerifyReport",
    "viscosity_verify", "PerronReport", "perron_envelope", "StabilityReport", "stability_probe",
    "comparison_study", "affine_minorants", "heat_solution", "stability_experiment", "hilbert_suite",
]


def _wt(t_idx, paths):
    return paths[np.arange(len(t_idx)), t_idx, 0]


def terminal_functional(name) -> PathFunctional:
    """Terminal functionals of the path (read at the path's last index).

    ``square``: ``w_T^2``; ``linear``: ``w_T``; ``const``: 1; ``bounded``:
    ``sin(w_T) + cos(int_0^T w) / 2`` (trapezoid integral).
    """

    def last(paths):
        return paths[:, -1, 0]

    table = {
        "square": lambda t, p, dt: last(p) ** 2,
        "linear": lambda t, p, dt: last(p),
        "const": lambda t, p, dt: np.ones(len(p)),
        "bounded": lambda t, p, dt: np.sin(last(p)) + 0.5 * np.cos(trapezoid(p[:, :, 0], dx=dt, axis=1)),
    }
    if name not in table:
        raise ValueError(f"unknown terminal functional {name!r}; choose from {sorted(table)}")
    return PathFunctional(table[name], f"xi_{name}")


def heat_reference_functional(xi: PathFunctional, c, N, dt, budget=None) -> PathFunctional:
    """``theta -> E[xi(w ⊗_t M)]`` for the driftless martingale tree with rate ``c``, no stopping."""
    if not c > 0:
        raise ValueError("the variance rate must be positive")
    grid = ControlGrid(c, dt, [0.0], [c])

    def batch(t_idx, paths, _dt):
        out = np.empty(len(t_idx))
        for t in np.unique(t_idx):
            sel = np.nonzero(t_idx == t)[0]
            out[sel] = terminal_expectation_batch(xi, grid, N, int(t), paths[sel], sense=1, budget=budget)
        return out

    return PathFunctional(batch, f"heat[{xi.name}, c={c:g}]")


def heat_reference(xi: PathFunctional, c, theta: SpaceTimePoint, budget=None) -> float:
    """Reference solution of the heat-type equation with nonlinearity ``(c/2) tr gamma`` at ``theta``."""
    return heat_reference_functional(xi, c, theta.N, theta.dt, budget)(theta)


def heat_solution(T=1.0, c=1.0, eps=0.0):
    """Closed form ``w_t^2 + c (T - t) + eps w_t (T - t)``."""
    return PathFunctional(lambda t, p, dt: _wt(t, p) ** 2 + c * (T - t * dt) + eps * _wt(t, p) * (T - t * dt),
                          f"heat_sol(c={c:g}, eps={eps:g})")


def sample_points(cfg: ExperimentConfig, n=None, seed=None, interior=True):
    """Nodes of the reference tree (increments ``0, +-sqrt(L dt)``) reached by seeded random walks.

    Times are uniform on ``[1, N-1]`` when ``interior``, else on ``[0, N]``; each path is
    held at its last value after the sampled time. Interior times also leave room for
    the smallest localization level, so every point admits a jet test.
    """
    rng = np.random.default_rng(cfg.sample_seed if seed is None else seed)
    step = math.sqrt(cfg.L * cfg.dt)
    lo, hi = (1, cfg.N - 1) if interior else (0, cfg.N)
    if interior:
        room = int(math.floor((cfg.T - min(cfg.delta_grid)) / cfg.dt + 1e-9))
        hi = max(lo, min(hi, room))
    if hi < lo:
        raise ValueError("no interior times on this grid")
    out = []
    for _ in range(n or cfg.n_samples):
        k = int(rng.integers(lo, hi + 1))
        inc = step * rng.integers(-1, 2, size=(k, cfg.m))
        vals = np.zeros((cfg.N + 1, cfg.m))
        vals[1:k + 1] = np.cumsum(inc, axis=0)
        vals[k + 1:] = vals[k]
        out.append(SpaceTimePoint(k, Path(vals, cfg.dt)))
    return out


# ---------------------------------------------------------------------------


@dataclass
class VerifyReport:
    sub: object
    sup: object

    @property
    def passed(self):
        return self.sub.passed and self.sup.passed

    def to_dict(self):
        return {"sub": self.sub.to_dict(), "super": self.sup.to_dict(), "pass": self.passed}


def viscosity_verify(u: PathFunctional, G: GFunction, cfg: ExperimentConfig, points=None, grid=None) -> VerifyReport:
    """Run the sub- and supersolution checks at sample points; passes iff both do."""
    points = points or sample_points(cfg)
    tol = 5 * cfg.dt * cfg.tol_scale
    jets = lambda uu, th: default_jet_grid(uu, th, cfg.jet_step)
    kw = dict(delta_grid=cfg.delta_grid, grid=grid, L=cfg.L, tol_residual=tol, budget=cfg.budget())
    return VerifyReport(check_subsolution(u, G, points, jets, **kw), check_supersolution(u, G, points, jets, **kw))


# ---------------------------------------------------------------------------


def affine_minorants(slopes, T=1.0):
    """``2 a w_t - a^2``: exact solutions of the heat equation lying below ``w_t^2``."""
    return [PathFunctional(lambda t, p, dt, a=a: 2 * a * _wt(t, p) - a * a, f"aff({a:g})") for a in slopes]


@dataclass
class PerronReport:
    members_checked: list
    dominates_members: bool
    below_upper: bool
    sub: object
    sup: object | None

    @property
    def passed(self):
        return all(self.members_checked) and self.dominates_members and self.below_upper and self.sub.passed

    def to_dict(self):
        return {"members_sub": self.members_checked, "dominates_members": self.dominates_members,
                "below_upper": self.below_upper, "envelope_sub": self.sub.to_dict(),
                "envelope_super": None if self.sup is None else self.sup.to_dict(), "pass": self.passed}


def perron_envelope(family, eval_points, G: GFunction, lower=None, upper=None, cfg: ExperimentConfig | None = None,
                    check_members=True, grid=None):
    """Pointwise supremum of a family of subsolutions, re-checked on the sample.

    Returns the envelope functional and a :class:`PerronReport`. The supersolution
    check of the envelope is recorded, not required.
    """
    family = list(family)
    if not family:
        raise ValueError("the subsolution family is empty")
    cfg = cfg or ExperimentConfig()
    tol = 5 * cfg.dt * cfg.tol_scale

    def batch(t_idx, paths, dt):
        return np.max(np.stack([f.batch(t_idx, paths, dt) for f in family]), axis=0)

    env = PathFunctional(batch, "perron")
    jets = lambda uu, th: default_jet_grid(uu, th, cfg.jet_step)
    kw = dict(delta_grid=cfg.delta_grid, grid=grid, L=cfg.L, tol_residual=tol)
    members = [check_subsolution(f, G, eval_points, jets, **kw).passed for f in family] if check_members else []
    P = PointSet.from_points(eval_points)
    ev = P.evaluate(env)
    dom = all(np.all(ev >= P.evaluate(f)) for f in family)
    below = True if upper is None else bool(np.all(ev <= P.evaluate(upper) + 1e-12))
    if lower is not None:
        below = below and bool(np.all(P.evaluate(lower) <= ev + 1e-12))
    sub = check_subsolution(env, G, eval_points, jets, **kw)
    sup = check_supersolution(env, G, eval_points, jets, **kw)
    return env, PerronReport(members, dom, below, sub, sup)


# ---------------------------------------------------------------------------


@dataclass
class StabilityReport:
    traces: list = field(default_factory=list)  # per n: dict
    limit_jet: tuple | None = None
    limit_residual: float = math.nan
    tolerance: float = 0.0
    failures: int = 0

    @property
    def passed(self):
        return self.failures == 0 and self.limit_residual <= self.tolerance

    def to_dict(self):
        return {"traces": self.traces, "limit_jet": self.limit_jet, "limit_residual": self.limit_residual,
                "tolerance": self.tolerance, "failures": self.failures, "pass": self.passed}


def _closest_member_alpha(u, theta, beta, gamma, alpha, delta_grid, grid, L, span=4.0, rounds=4, width=33):
    """Member alpha of ``u`` at ``theta`` closest to ``alpha`` (membership is upward closed in alpha)."""
    jet0 = Jet(alpha, beta, gamma)
    if jet_test_batch(u, theta, [jet0], delta_grid, "sub", grid, L)[0].member:
        return alpha
    lo, hi = alpha, alpha + span
    if not jet_test_batch(u, theta, [Jet(hi, beta, gamma)], delta_grid, "sub", grid, L)[0].member:
        return None
    for _ in range(rounds):
        cand = np.linspace(lo, hi, width)
        reps = jet_test_batch(u, theta, [Jet(a, beta, gamma) for a in cand], delta_grid, "sub", grid, L)
        first = next(i for i, r in enumerate(reps) if r.member)
        lo, hi = cand[max(first - 1, 0)], cand[first]
    return float(hi)


def stability_probe(u_sequence, G_sequence, theta: SpaceTimePoint, jet: Jet, u_limit: PathFunctional,
                    G_limit: GFunction, cfg: ExperimentConfig | None = None, candidates=None, grid=None,
                    labels=None):
    """Track approximating member jets of ``u_n`` for a jet of the limit.

    For each ``u_n`` the candidate points (``theta`` first) are searched for a
    member subjet ``(alpha_n, beta + gamma (w_n - w), gamma)`` with ``alpha_n`` the
    member closest to ``alpha``. The trace gap is
    ``|alpha_n - alpha| + |beta_n - beta| + |u_n(theta_n) - u(theta)| + d_inf(theta_n, theta)``.
    The limit residual is evaluated with the last approximating jet at ``theta``.
    """
    cfg = cfg or ExperimentConfig(N=theta.N, T=theta.N * theta.dt)
    candidates = [theta] + list(candidates or [])
    labels = list(labels) if labels is not None else list(range(1, len(u_sequence) + 1))
    u_theta = u_limit(theta)
    traces, last, fails = [], None, 0
    for lab, un, Gn in zip(labels, u_sequence, G_sequence):
        found = None
        for cand in candidates:
            beta_n = jet.beta + jet.gamma @ (cand.omega_t - theta.omega_t)
            a = _closest_member_alpha(un, cand, beta_n, jet.gamma, jet.alpha, cfg.delta_grid, grid, cfg.L)
            if a is not None:
                found = (cand, a, beta_n)
                break
        if found is None:
            fails += 1
            traces.append({"n": lab, "found": False})
            continue
        cand, a, beta_n = found
        gap = (abs(a - jet.alpha) + float(np.linalg.norm(beta_n - jet.beta)) + abs(un(cand) - u_theta)
               + d_infty(cand, theta))
        res_n = residual(Gn, cand, un(cand), Jet(a, beta_n, jet.gamma))
        traces.append({"n": lab, "found": True, "alpha_n": a, "beta_n": beta_n.tolist(), "gap": gap,
                       "residual_n": res_n, "t_n": cand.t})
        last = Jet(a, beta_n, jet.gamma)
    rep = StabilityReport(traces, None if last is None else last.as_tuple(), math.nan,
                          5 * theta.dt * cfg.tol_scale, fails)
    if last is not None:
        rep.limit_residual = residual(G_limit, theta, u_theta, last)
    return rep


# ---------------------------------------------------------------------------


def comparison_study(cfg: ExperimentConfig, shift=0.1, terminal="bounded"):
    """Heat reference with a bounded terminal functional, ``u = ref - shift`` against ``v = ref + shift``."""
    grid = ControlGrid(cfg.L, cfg.dt, [0.0], [0.0, cfg.L])
    S = reference_tree_points(grid, cfg.N)
    ref = heat_reference_functional(terminal_functional(terminal), cfg.L, cfg.N, cfg.dt, cfg.budget())
    vals = S.evaluate(ref)
    G = g_registry(cfg.G) if cfg.G != "heat_drift" else g_registry("heat_drift", eps=cfg.eps)
    return comparison_pipeline(vals - shift, vals + shift, G, S, S, cfg.n_ladder, p=cfg.p,
                               tol=5 * cfg.dt * cfg.tol_scale)


def stability_experiment(cfg: ExperimentConfig, point_index=3):
    """Heat family ``c_n = 1 - 1/n`` over ``cfg.stability_ns`` probed at a sampled interior point.

    The limit jet is the exact one of ``w_t^2 + (T - t)``: ``(-1, 2 w_t, 2)``.
    """
    pts = sample_points(cfg)
    theta = pts[min(point_index, len(pts) - 1)]
    w = theta.omega_t
    jet = Jet(-1.0, 2.0 * w, 2.0 * np.eye(len(w)))
    ns = list(cfg.stability_ns)
    us = [heat_solution(cfg.T, 1.0 - 1.0 / n) for n in ns]
    Gs = [heat_G(1.0 - 1.0 / n, cfg.m) for n in ns]
    return stability_probe(us, Gs, theta, jet, heat_solution(cfg.T, 1.0), heat_G(1.0, cfg.m), cfg, labels=ns)


# ---------------------------------------------------------------------------


def _smooth_tail_point(N, T=1.0):
    dt = T / N
    s = -T + np.arange(N + 1) * dt
    return HilbertPoint([0.5], ((s + T) / T) ** 2 * np.cos(s), dt)


def hilbert_suite(name, refinements=3, N0=8, tol_scale=1.0):
    """Lifted-state numerics under grid refinement.

    Returns ``{"records": [(name, value, tolerance, pass)], "rows": [(dt, error)]}``.

    ``resolvent``: round-trip error of ``(A - I)(A - I)^{-1}`` on a smooth point; each
    halving must cut it by a factor within ``4 +- 0.5``.
    ``semigroup``: ``S_s S_t = S_{s+t}`` exactly on every grid.
    ``bnorm``: ``|(1, 0)|_B = sqrt(1.5)`` within ``1e-6`` from ``N = 256`` on.
    ``conv``: convolution of 1 against the slope path equals ``t^2 / 2`` within ``1e-8``,
    plus the step-versus-smooth continuity witness over ``refinements + 1`` levels.
    """
    recs, rows = [], []
    if name == "resolvent":
        errs = []
        for k in range(refinements + 1):
            N = N0 * 2 ** k
            e = roundtrip_error(_smooth_tail_point(N))
            errs.append(e)
            rows.append((1.0 / N, e))
        for k in range(refinements):
            r = errs[k] / errs[k + 1]
            recs.append((f"halving_factor[{k + 1}]", r, 0.5 * tol_scale, abs(r - 4.0) <= 0.5 * tol_scale))
    elif name == "semigroup":
        for k in range(refinements + 1):
            N = N0 * 2 ** k
            dt = 1.0 / N
            x = HilbertPoint([0.3], np.sin(np.arange(N + 1)), dt)
            s, t = dt * (N // 4), dt * (3 * N // 8)
            a, b = semigroup_apply(s, semigroup_apply(t, x)), semigroup_apply(s + t, x)
            err = math.inf if a.x1.shape != b.x1.shape else float(np.max(np.abs(a.x1 - b.x1)) + np.max(np.abs(a.x0 - b.x0)))
            rows.append((dt, err))
            recs.append((f"semigroup_law[N={N}]", err, 0.0, err == 0.0))
    elif name == "bnorm":
        for k in range(refinements + 1):
            N = 256 * 2 ** k
            err = abs(b_norm(HilbertPoint([1.0], np.zeros(N + 1), 1.0 / N)) - math.sqrt(1.5))
            rows.append((1.0 / N, err))
            recs.append((f"b_norm_error[N={N}]", err, 1e-6 * tol_scale, err <= 1e-6 * tol_scale))
    elif name == "conv":
        for k in range(refinements + 1):
            N = N0 * 2 ** k
            dt = 1.0 / N
            theta = SpaceTimePoint(N, Path(np.arange(N + 1) * dt, dt))
            err = abs(conv_functional(lambda r: np.ones_like(r), theta) - 0.5)
            rows.append((dt, err))
            recs.append((f"conv_slope_error[N={N}]", err, 1e-8 * tol_scale, err <= 1e-8 * tol_scale))
        pairs = alternating_pair_family(levels=refinements + 1)
        smooth = conv_continuity_experiment(np.cos, pairs)
        step = conv_continuity_experiment(lambda r: (r <= 0.5 + 1e-12).astype(float), pairs)
        recs.append(("smooth_ratio_spread", smooth.spread, 2.0, smooth.spread <= 2.0))
        for i, g in enumerate(step.growth):
            recs.append((f"step_ratio_growth[{i + 1}]", g, 1.5, g >= 1.5))
    else:
        raise ValueError(f"unknown suite {name!r}")
    return {"records": recs, "rows": rows}

"""Jet membership tests, residual checks and nonlinearities G for the path-dependent equation

    -d_t u - G(theta, u, d_w u, d_ww u) = 0.

A jet ``(alpha, beta, gamma)`` belongs to the lattice subjet of ``u`` at ``theta``
when the upper expectation of ``(u^theta - phi)(T ^ h_delta, B)`` equals
``u(theta)`` (superjet: lower expectation). All jets tested at one point share a
single tree: the shifted functional is evaluated once per node and the test
monomials are subtracted in a batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .expectation import solve_tree, terminal_expectation_batch
from .lattice import Budget, ControlGrid
from .pathspace import (Jet, Path, PathFunctional, SpaceTimePoint, backward_dp, freeze, freeze_rows,
                        h_delta_batch, phi_batch, shift_function)

__all__ = [
    "pucci_plus", "GFunction", "JetTestReport", "CheckReport", "RhoEstimate", "default_jet_grid",
    "jet_grid", "jet_test_batch", "subjet_test", "superjet_test", "residual", "check_subsolution",
    "check_supersolution", "pucci_operator_G", "value_function_phi", "value_function_functional",
    "rho_G", "rho_estimate", "optimal_stop_point", "g_registry", "heat_G", "zero_G", "heat_drift_G",
    "finite_difference_jet",
]

MEMBER_TOL = 1e-9


def pucci_plus(gamma) -> float:
    """Largest eigenvalue clipped at zero: ``sup_{|x| <= 1} <gamma x, x>``."""
    g = np.atleast_2d(np.asarray(gamma, dtype=float))
    if g.shape[0] != g.shape[1] or not np.array_equal(g, g.T):
        raise ValueError("gamma must be a symmetric matrix")
    return max(float(np.linalg.eigvalsh(g)[-1]), 0.0)


class GFunction:
    """A nonlinearity ``G(theta, r, beta, gamma)``.

    Parameters
    ----------
    fn : callable
        ``fn(theta, r, beta, gamma) -> float`` with ``beta`` of shape (m,) and
        ``gamma`` of shape (m, m).
    lipschitz_L : float
        Declared bound ``|G(.., b + b', g + g') - G(.., b, g)| <= L (|b'| + |g'|)``.
    theta_dependent : bool
        False when ``G`` ignores the space-time point (then its modulus is zero).
    """

    def __init__(self, fn, lipschitz_L, name="G", monotone_in_r=True, elliptic=True, theta_dependent=True):
        self.fn = fn
        self.lipschitz_L = float(lipschitz_L)
        self.name = name
        self.monotone_in_r = monotone_in_r
        self.elliptic = elliptic
        self.theta_dependent = theta_dependent

    def __call__(self, theta, r, beta, gamma):
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        return float(self.fn(theta, float(r), beta, gamma))

    def __repr__(self):
        return f"GFunction({self.name}, L={self.lipschitz_L:g})"

    def lipschitz_violation(self, thetas, rng, n=200, scale=2.0):
        """Largest ``|dG| - L (|db| + |dg|)`` over random perturbations (<= 0 when the bound holds)."""
        worst = -np.inf
        for _ in range(n):
            th = thetas[rng.integers(len(thetas))]
            m = th.path.m
            b, db = rng.normal(size=m) * scale, rng.normal(size=m) * scale
            g, dg = _sym(rng.normal(size=(m, m)) * scale), _sym(rng.normal(size=(m, m)) * scale)
            r = rng.normal()
            lhs = abs(self(th, r, b + db, g + dg) - self(th, r, b, g))
            rhs = self.lipschitz_L * (np.linalg.norm(db) + np.linalg.norm(dg, 2))
            worst = max(worst, lhs - rhs)
        return worst

    def ellipticity_violation(self, thetas, rng, n=200, scale=2.0):
        """Largest ``G(gamma) - G(gamma')`` over random pairs ``gamma <= gamma'`` (<= 0 when elliptic)."""
        worst = -np.inf
        for _ in range(n):
            th = thetas[rng.integers(len(thetas))]
            m = th.path.m
            b = rng.normal(size=m) * scale
            g = _sym(rng.normal(size=(m, m)) * scale)
            x = rng.normal(size=(m, m))
            worst = max(worst, self(th, 0.0, b, g) - self(th, 0.0, b, g + x @ x.T))
        return worst


def _sym(a):
    return 0.5 * (a + a.T)


def zero_G():
    return GFunction(lambda th, r, b, g: 0.0, 0.0, "zero", theta_dependent=False)


def heat_G(c=1.0, m=1):
    """``(c/2) tr gamma``; Lipschitz with ``L = c m / 2`` in the operator norm."""
    return GFunction(lambda th, r, b, g: 0.5 * c * float(np.trace(g)), 0.5 * c * m, f"heat(c={c:g})",
                     theta_dependent=False)


def heat_drift_G(eps=1.0, m=1):
    """``(1/2) tr gamma + eps * sum(w_t)``: the heat nonlinearity with a path-dependent source."""
    return GFunction(lambda th, r, b, g: 0.5 * float(np.trace(g)) + eps * float(np.sum(th.omega_t)),
                     0.5 * m, f"heat_drift(eps={eps:g})")


def pucci_operator_G(alpha, beta, gamma, L) -> GFunction:
    """The extremal nonlinearity attached to the jet ``(alpha, beta, gamma)``.

    ``G(theta, r, b', g') = -alpha - L |beta + gamma w_t - b'| - L (gamma - g')^+``,
    so that the test monomial of the jet solves ``-d_t phi - G = 0`` at every point.
    """
    jet = Jet(alpha, beta, gamma)

    def fn(th, r, b, g):
        w = th.omega_t
        return (-jet.alpha - L * float(np.linalg.norm(jet.beta + jet.gamma @ w - b))
                - L * pucci_plus(jet.gamma - g))

    return GFunction(fn, L, f"pucci(L={L:g})")


def g_registry(name, **kw) -> GFunction:
    """Named nonlinearities: ``zero``, ``heat``, ``heat_drift``."""
    table = {"zero": zero_G, "heat": heat_G, "heat_drift": heat_drift_G}
    if name not in table:
        raise ValueError(f"unknown G {name!r}; choose from {sorted(table)}")
    return table[name](**kw)


def residual(G: GFunction, theta: SpaceTimePoint, u_value, jet: Jet) -> float:
    """``-alpha - G(theta, u(theta), beta, gamma)``."""
    return -jet.alpha - G(theta, u_value, jet.beta, jet.gamma)


# ---------------------------------------------------------------------------
# jet membership


@dataclass
class JetTestReport:
    member: bool
    value_gap: float
    delta_used: float
    residual: float | None = None
    tolerance: float = MEMBER_TOL
    jet: Jet | None = None

    def to_dict(self):
        return {"member": self.member, "value_gap": self.value_gap, "delta_used": self.delta_used,
                "residual": self.residual, "tolerance": self.tolerance,
                "jet": None if self.jet is None else self.jet.as_tuple()}


class _JetProblem:
    """``(u^theta - phi_j)(k ^ h_delta, B)`` for a batch of jets on the relative tree."""

    def __init__(self, u: PathFunctional, theta: SpaceTimePoint, jets, delta):
        self.ut = shift_function(u, theta)
        self.jets = list(jets)
        self.delta = delta
        self.dt = theta.dt
        self.nb = len(self.jets)

    def values(self, k, paths):
        s = np.minimum(k, h_delta_batch(self.delta, paths, self.dt))
        fr = freeze_rows(paths, s)
        base = self.ut.batch(s, fr, self.dt)
        return np.stack([base - phi_batch(j, s, fr, self.dt) for j in self.jets])

    def absorbed(self, k, paths):
        hit = h_delta_batch(self.delta, paths, self.dt) <= k
        return np.broadcast_to(hit, (self.nb, len(paths)))


def _default_grid(theta, L):
    return ControlGrid.symmetric(L, theta.dt, 3, 2, m=theta.path.m)


def _pick_delta(theta, delta):
    """The smallest feasible level in ``(0, T - t]`` from a scalar or a grid."""
    room = theta.N * theta.dt - theta.t + 1e-12 * max(1.0, theta.N * theta.dt)
    cands = sorted(float(d) for d in np.atleast_1d(delta) if 0 < float(d) <= room)
    return cands[0] if cands else None


def jet_test_batch(u: PathFunctional, theta: SpaceTimePoint, jets, delta, role="sub", grid=None, L=1.0,
                   tol=MEMBER_TOL, budget: Budget | None = None):
    """Membership reports for many jets at one point (shared tree)."""
    jets = list(jets)
    d = _pick_delta(theta, delta)
    if d is None:
        return [JetTestReport(False, math.nan, math.nan, None, tol, j) for j in jets]
    grid = grid or _default_grid(theta, L)
    sense = 1 if role == "sub" else -1
    sol = solve_tree(_JetProblem(u, theta, jets, d), grid, theta.N - theta.t_index, sense, True, budget)
    u0 = u(theta)
    out = []
    for j, v in zip(jets, sol.value):
        gap = float(u0 - v)
        out.append(JetTestReport(abs(gap) <= tol, gap, d, None, tol, j))
    return out


def subjet_test(u, theta, jet, delta, grid=None, L=1.0, tol=MEMBER_TOL, budget=None) -> JetTestReport:
    """Is ``jet`` in the lattice subjet of ``u`` at ``theta``?"""
    return jet_test_batch(u, theta, [jet], delta, "sub", grid, L, tol, budget)[0]


def superjet_test(u, theta, jet, delta, grid=None, L=1.0, tol=MEMBER_TOL, budget=None) -> JetTestReport:
    """Is ``jet`` in the lattice superjet of ``u`` at ``theta``?"""
    return jet_test_batch(u, theta, [jet], delta, "super", grid, L, tol, budget)[0]


def finite_difference_jet(u: PathFunctional, theta: SpaceTimePoint, h=None):
    """Estimate ``(alpha, beta, gamma)`` from path-wise differences.

    Time slope: the path is frozen and the clock moves one step (backward at the
    horizon). Space derivatives: the path is bumped by ``h e_i`` from ``t`` on.
    """
    dt = theta.dt
    N, k = theta.N, theta.t_index
    m = theta.path.m
    h = h or math.sqrt(dt)
    base = theta.frozen_values()
    u0 = u(theta)

    def at(vals, idx=k):
        return float(u.batch(np.array([idx]), freeze(vals, idx)[None], dt)[0])

    if k < N:
        alpha = (at(base, k + 1) - u0) / dt
    else:
        alpha = (u0 - at(base, k - 1) if k > 0 else 0.0) / dt

    def bump(vec):
        v = base.copy()
        v[k:] += vec
        return v

    beta = np.zeros(m)
    gamma = np.zeros((m, m))
    E = np.eye(m) * h
    for i in range(m):
        up, dn = at(bump(E[i])), at(bump(-E[i]))
        beta[i] = (up - dn) / (2 * h)
        gamma[i, i] = (up - 2 * u0 + dn) / h ** 2
        for j in range(i):
            pp, pm = at(bump(E[i] + E[j])), at(bump(E[i] - E[j]))
            mp, mm = at(bump(-E[i] + E[j])), at(bump(-E[i] - E[j]))
            gamma[i, j] = gamma[j, i] = (pp - pm - mp + mm) / (4 * h * h)
    return Jet(alpha, beta, gamma)


def jet_grid(center: Jet, alpha_offsets, beta_offsets=(0.0,), gamma_offsets=(0.0,)):
    """Jets around ``center``: alpha shifts, beta shifts along each axis, gamma shifts along the identity."""
    out = []
    m = center.m
    I = np.eye(m)
    for ga in gamma_offsets:
        for bo in beta_offsets:
            dirs = [np.zeros(m)] if bo == 0 else [I[i] * bo for i in range(m)]
            for db in dirs:
                for a in alpha_offsets:
                    out.append(Jet(center.alpha + a, center.beta + db, center.gamma + ga * I))
    return out


def default_jet_grid(u, theta, step=0.1):
    """``alpha`` at the estimate plus ``{-4..4}`` steps, ``beta`` and ``gamma`` at the estimate plus ``{-1,0,1}`` steps."""
    c = finite_difference_jet(u, theta)
    return jet_grid(c, [i * step for i in range(-4, 5)], (-step, 0.0, step), (-step, 0.0, step))


# ---------------------------------------------------------------------------
# solution checks


@dataclass
class CheckReport:
    """Outcome of a sub- or supersolution check over sample points and jets.

    ``worst`` is the largest violation: the residual itself for the sub check,
    its negative for the super check. ``passed`` iff ``worst <= tolerance``.
    """

    role: str
    worst: float
    tolerance: float
    rows: list = field(default_factory=list)  # per point: dict
    n_members: int = 0

    @property
    def passed(self):
        return self.worst <= self.tolerance

    def to_dict(self):
        return {"role": self.role, "worst": self.worst, "tolerance": self.tolerance, "pass": self.passed,
                "n_members": self.n_members, "points": self.rows}

    def csv_rows(self):
        head = ["point", "t", "n_members", "worst_residual", "alpha", "beta", "gamma"]
        rows = []
        for r in self.rows:
            j = r["worst_jet"] or (math.nan, [math.nan], [[math.nan]])
            rows.append([r["point"], r["t"], r["n_members"], r["worst"], j[0], j[1], j[2]])
        return head, rows


def _check(u, G, points, jet_grid_fn, delta_grid, role, grid, L, tol_member, tol_residual, budget):
    worst = -math.inf
    rows, total = [], 0
    for i, th in enumerate(points):
        jets = jet_grid_fn(u, th) if callable(jet_grid_fn) else list(jet_grid_fn)
        reps = jet_test_batch(u, th, jets, delta_grid, role, grid, L, tol_member, budget)
        u0 = u(th)
        pw, pj, nm = -math.inf, None, 0
        for rep in reps:
            if not rep.member:
                continue
            nm += 1
            res = residual(G, th, u0, rep.jet)
            rep.residual = res
            viol = res if role == "sub" else -res
            if viol > pw:
                pw, pj = viol, rep.jet
        total += nm
        worst = max(worst, pw)
        rows.append({"point": i, "t": th.t, "n_members": nm, "worst": pw if nm else None,
                     "worst_jet": None if pj is None else pj.as_tuple()})
    if total == 0:
        worst = -math.inf
    return CheckReport(role, worst, tol_residual, rows, total)


def check_subsolution(u, G, sample_points, jet_grid=default_jet_grid, delta_grid=(0.1,), grid=None, L=1.0,
                      tol_member=MEMBER_TOL, tol_residual=None, budget=None) -> CheckReport:
    """Residual ``<= tol`` at every member subjet on the sample (``jet_grid`` may be a list or a callable)."""
    dt = sample_points[0].dt
    tol_residual = 5 * dt if tol_residual is None else tol_residual
    return _check(u, G, sample_points, jet_grid, delta_grid, "sub", grid, L, tol_member, tol_residual, budget)


def check_supersolution(u, G, sample_points, jet_grid=default_jet_grid, delta_grid=(0.1,), grid=None, L=1.0,
                        tol_member=MEMBER_TOL, tol_residual=None, budget=None) -> CheckReport:
    """Residual ``>= -tol`` at every member superjet on the sample."""
    dt = sample_points[0].dt
    tol_residual = 5 * dt if tol_residual is None else tol_residual
    return _check(u, G, sample_points, jet_grid, delta_grid, "super", grid, L, tol_member, tol_residual, budget)


# ---------------------------------------------------------------------------
# the extremal value function


def value_function_functional(xi: PathFunctional, jet: Jet, grid: ControlGrid, N: int, budget=None):
    """``theta -> inf E[xi^theta] + phi(theta)`` over measures without stopping, as a functional."""

    def batch(t_idx, paths, dt):
        out = np.empty(len(t_idx))
        for t in np.unique(t_idx):
            sel = np.nonzero(t_idx == t)[0]
            lo = terminal_expectation_batch(xi, grid, N, int(t), paths[sel], sense=-1, budget=budget)
            out[sel] = lo + phi_batch(jet, t_idx[sel], paths[sel], dt)
        return out

    return PathFunctional(batch, "phi_xi")


def value_function_phi(xi: PathFunctional, jet: Jet, theta: SpaceTimePoint, grid: ControlGrid | None = None,
                       L=1.0, budget=None) -> float:
    """Lower expectation of the shifted terminal functional plus the test monomial at ``theta``."""
    grid = grid or _default_grid(theta, L)
    return value_function_functional(xi, jet, grid, theta.N, budget)(theta)


# ---------------------------------------------------------------------------
# modulus of continuity in the space-time variable


@dataclass
class RhoEstimate:
    """Empirical lower estimate of the modulus of ``G`` at ``x``."""

    x: float
    value: float
    n_pairs: int
    n_within: int
    p: float

    def to_dict(self):
        return {"x": self.x, "value": self.value, "n_pairs": self.n_pairs, "n_within": self.n_within, "p": self.p}


def _pair_pool(N, T, m, size, p, seed):
    """Seeded random pairs of stopped paths with their backward distances."""
    rng = np.random.default_rng(seed)
    dt = T / N
    pairs = []
    for i in range(size):
        t = int(rng.integers(1, N + 1))
        inc = rng.normal(scale=math.sqrt(dt), size=(N, m))
        base = np.vstack([np.zeros((1, m)), np.cumsum(inc, axis=0)])
        other = base.copy()
        scale = 10.0 ** rng.uniform(-3, 0)
        tp = t
        if i % 2:
            tp = int(np.clip(t + rng.integers(-1, 2), 1, N))
            other[1:] += rng.normal(scale=scale, size=(N, m))
        else:
            other[t:] += rng.normal(scale=scale, size=m)
        th = SpaceTimePoint(t, Path(freeze(base, t), dt))
        thp = SpaceTimePoint(tp, Path(freeze(other, tp), dt))
        pairs.append((th, thp, backward_dp(p, th, thp)))
    return pairs


def rho_estimate(G: GFunction, x, N=8, T=1.0, m=1, sample_budget=400, p=1.0, seed=0,
                 beta_box=2.0, gamma_box=2.0) -> RhoEstimate:
    """Sup of ``|G(theta, b, g) - G(theta', b, g)|`` over sampled pairs with backward distance ``<= x``.

    The pool of random pairs depends on the seed only, so the estimate is
    non-decreasing in ``x``. It is topped up with one constructed pair at distance
    exactly ``x`` whose paths differ only from the current time on (a jump of size
    ``x / (1 + dt^(1/p))`` in ``w_t``). ``(b, g)`` are drawn from the box
    ``|b| <= beta_box``, ``|g| <= gamma_box``.
    """
    x = float(x)
    if not G.theta_dependent or x <= 0:
        return RhoEstimate(x, 0.0, 0, 0, p)
    rng = np.random.default_rng(seed + 1)
    dt = T / N
    best, within = 0.0, 0
    for th, thp, d in _pair_pool(N, T, m, sample_budget, p, seed):
        b = rng.uniform(-beta_box, beta_box, size=m)
        g = _sym(rng.uniform(-gamma_box, gamma_box, size=(m, m)))
        if d > x:
            continue
        within += 1
        best = max(best, abs(G(th, 0.0, b, g) - G(thp, 0.0, b, g)))
    t = N // 2 or 1
    base = np.zeros((N + 1, m))
    jump = base.copy()
    jump[t:, 0] = x / (1.0 + dt ** (1.0 / p)) * (1 - 1e-12)
    th, thp = SpaceTimePoint(t, Path(base, dt)), SpaceTimePoint(t, Path(jump, dt))
    if backward_dp(p, th, thp) <= x:
        within += 1
        zb, zg = np.zeros(m), np.zeros((m, m))
        best = max(best, abs(G(th, 0.0, zb, zg) - G(thp, 0.0, zb, zg)))
    return RhoEstimate(x, best, sample_budget + 1, within, p)


def rho_G(G: GFunction, x, sample_budget=400, **kw) -> float:
    return rho_estimate(G, x, sample_budget=sample_budget, **kw).value


# ---------------------------------------------------------------------------
# optimal stopping point of u - phi


def optimal_stop_point(u: PathFunctional, jet: Jet, delta, grid: ControlGrid, N: int, budget=None):
    """Optimal stop node of ``sup E[(u - phi)(T ^ h_delta, B)]`` from the origin.

    Returns ``(theta_star, shifted_jet, h_index)`` for the first reachable node
    (shallowest level, canonical order) where stopping is optimal and ``h_delta``
    has not been reached, or ``None`` when every optimal stop is forced by ``h_delta``.
    The shifted jet is ``(alpha, beta + gamma w*, gamma)``.
    """
    dt = grid.dt
    root = SpaceTimePoint(0, Path.zeros(N, dt, grid.m))
    prob = _JetProblem(u, root, [jet], delta)
    sol = solve_tree(prob, grid, N, 1, True, budget)
    pol = sol.policy()
    for k, r, _ in pol.stop_nodes():
        lv = sol.levels[k]
        if lv.absorbed[0, r]:
            continue
        path = lv.paths[r]
        theta = SpaceTimePoint(k, Path(path, dt))
        w = path[k]
        h = int(h_delta_batch(delta, path[None], dt)[0])
        return theta, Jet(jet.alpha, jet.beta + jet.gamma @ w, jet.gamma), h
    return None

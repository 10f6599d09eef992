"""Upper and lower nonlinear expectations by backward induction on the scenario tree.

The solver works on the tree of B-prefixes generated by the distinct one-step
increments of a :class:`~ppdelab.lattice.ControlGrid`. Each control charges a
subset of those increments with its branch probabilities, so the value at a node
is

    max(f(node), max_control sum_j p_j V(child_j))

(min for the lower expectation). Payoffs see only the stop index and the B path.

A *problem* is anything with an ``nb`` attribute and two methods
``values(k, paths) -> (nb, n)`` and ``absorbed(k, paths) -> (nb, n)`` taking
relative paths frozen at level ``k``; ``nb`` lets many payoffs (jets, roots) share
one tree.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .lattice import Budget, BudgetExceeded, ControlGrid, TreeMeasure, TreeNode, _root
from .pathspace import (Path, PathFunctional, SpaceTimePoint, concat_values, freeze, freeze_rows,
                        h_delta_batch)

__all__ = [
    "Payoff", "TreeSolution", "ControlPolicy", "DPPReport", "solve_tree", "sup_expectation",
    "inf_expectation", "conditional_sup", "conditional_sup_batch", "dpp_check", "pure_stopping_sup",
    "terminal_expectation_batch",
]


class Payoff:
    """A payoff ``f(T ^ h_delta, B)`` of the stop index and the B path.

    Parameters
    ----------
    f : PathFunctional or callable
        Evaluator; a bare callable is treated as ``f(t_idx, paths, dt) -> values``.
    delta : float, optional
        Localization level. When given, the payoff is read at ``min(stop, h_delta)``
        and nodes at or after ``h_delta`` are absorbing.
    bounded_above : bool
        Informational flag carried into reports.
    """

    def __init__(self, f, delta=None, bounded_above=True, name=None):
        if not isinstance(f, PathFunctional):
            f = PathFunctional(f, name or getattr(f, "__name__", "f"))
        if delta is not None and not delta > 0:
            raise ValueError("delta must be positive")
        self.functional = f
        self.delta = None if delta is None else float(delta)
        self.bounded_above = bool(bounded_above)
        self.name = name or f.name

    def __repr__(self):
        clip = "" if self.delta is None else f", delta={self.delta:g}"
        return f"Payoff({self.name}{clip})"

    def clip_index(self, t_idx, paths, dt):
        t_idx = np.asarray(t_idx, dtype=np.int64)
        if self.delta is None:
            return t_idx
        return np.minimum(t_idx, h_delta_batch(self.delta, paths, dt))

    def batch(self, t_idx, paths, dt):
        paths = np.asarray(paths, dtype=float)
        t_idx = np.broadcast_to(np.asarray(t_idx, dtype=np.int64), (paths.shape[0],))
        s = self.clip_index(t_idx, paths, dt)
        vals = self.functional.batch(s, freeze_rows(paths, s), dt)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"payoff {self.name} is not finite on the lattice")
        return vals

    def absorbed(self, t_idx, paths, dt):
        paths = np.asarray(paths, dtype=float)
        if self.delta is None:
            return np.zeros(paths.shape[0], dtype=bool)
        return h_delta_batch(self.delta, paths, dt) <= np.asarray(t_idx)

    def __call__(self, theta: SpaceTimePoint):
        return float(self.batch(np.array([theta.t_index]), theta.frozen_values()[None], theta.dt)[0])

    def _lift(self, other, op):
        if isinstance(other, Payoff):
            if other.delta != self.delta:
                raise ValueError("payoffs with different localization cannot be combined")
            other = other.functional
        return Payoff(op(self.functional, other), self.delta, self.bounded_above)

    def __add__(self, other):
        return self._lift(other, lambda a, b: a + b)

    __radd__ = __add__

    def __sub__(self, other):
        return self._lift(other, lambda a, b: a - b)

    def __mul__(self, c):
        return Payoff(self.functional * float(c), self.delta, self.bounded_above)

    __rmul__ = __mul__

    def __neg__(self):
        return Payoff(-self.functional, self.delta, self.bounded_above)


# ---------------------------------------------------------------------------
# problems


class _Single:
    def __init__(self, payoff: Payoff, dt):
        self.payoff, self.dt, self.nb = payoff, dt, 1

    def values(self, k, paths):
        return self.payoff.batch(k, paths, self.dt)[None]

    def absorbed(self, k, paths):
        return self.payoff.absorbed(k, paths, self.dt)[None]


class _Shifted:
    """``f`` read on ``base ⊗_tau paths`` for a stack of bases frozen at ``tau``."""

    def __init__(self, payoff: Payoff, base, tau, N, dt):
        self.payoff, self.tau, self.N, self.dt = payoff, tau, N, dt
        self.base = freeze(base, tau)
        self.nb = base.shape[0]

    def _full(self, paths):
        full = concat_values(self.base[:, None], self.tau, paths[None], self.N)
        return full.reshape(-1, *full.shape[2:])

    def values(self, k, paths):
        full = self._full(paths)
        return self.payoff.batch(self.tau + k, full, self.dt).reshape(self.nb, -1)

    def absorbed(self, k, paths):
        full = self._full(paths)
        return self.payoff.absorbed(self.tau + k, full, self.dt).reshape(self.nb, -1)


# ---------------------------------------------------------------------------
# tree construction and backward induction


@dataclass
class _Level:
    paths: np.ndarray  # (R, N+1, m) relative paths frozen at this level
    values: np.ndarray  # (nb, R) stop values
    absorbed: np.ndarray  # (nb, R)
    child_base: np.ndarray  # (R,) first child index in the next level, -1 if none


def _build(problem, grid: ControlGrid, N, budget: Budget):
    budget.check_grid(N, len(grid.drifts), len(grid.variances))
    incs = grid.increment_table().increments
    I, m = incs.shape
    paths = np.zeros((1, N + 1, m))
    levels, total = [], 1
    for k in range(N + 1):
        vals = np.asarray(problem.values(k, paths), dtype=float)
        absb = np.asarray(problem.absorbed(k, paths), dtype=bool)
        if vals.shape != (problem.nb, len(paths)) or absb.shape != vals.shape:
            raise ValueError(f"problem returned shape {vals.shape}, expected {(problem.nb, len(paths))}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite payoff on the lattice")
        alive = np.zeros(len(paths), dtype=bool) if k == N else ~absb.all(axis=0)
        na = int(alive.sum())
        base = np.full(len(paths), -1, dtype=np.int64)
        base[alive] = np.arange(na, dtype=np.int64) * I
        levels.append(_Level(paths, vals, absb, base))
        if na == 0:
            break
        total += na * I
        budget.check_nodes(total)
        parents = paths[alive]
        nxt = np.repeat(parents, I, axis=0)
        nxt[:, k + 1:, :] += np.tile(incs, (na, 1))[:, None, :]
        paths = nxt
    return levels


def _child_matrix(level: _Level, child_vals, I):
    nb, R = level.values.shape
    child = np.zeros((nb, R, I))
    alive = level.child_base >= 0
    if child_vals is not None and alive.any():
        child[:, alive] = child_vals.reshape(nb, -1, I)
    return child


def _backward(levels, table, sense, allow_stop, extra_forced=None):
    I = table.increments.shape[0]
    values = [None] * len(levels)
    choices = [None] * len(levels)
    child_vals = None
    for k in reversed(range(len(levels))):
        lv = levels[k]
        nb, R = lv.values.shape
        forced = lv.absorbed | (lv.child_base < 0)[None]
        if extra_forced is not None:
            forced = forced | extra_forced[k]
        child = _child_matrix(lv, child_vals, I)
        v, c = kernels.reduce_level(child.reshape(nb * R, I), table.ctrl_idx, table.ctrl_prob, table.ctrl_cnt,
                                    lv.values.reshape(-1), forced.reshape(-1), allow_stop, sense)
        values[k] = v.reshape(nb, R)
        choices[k] = c.reshape(nb, R)
        child_vals = values[k]
    return values, choices


@dataclass
class TreeSolution:
    """Values and optimal choices on every level of the solved tree."""

    grid: ControlGrid
    N: int
    sense: int
    levels: list
    values: list
    choices: list
    allow_stop: bool = True

    @property
    def value(self):
        """Root values, shape ``(nb,)``."""
        return self.values[0][:, 0].copy()

    @property
    def n_nodes(self):
        return sum(len(lv.child_base) for lv in self.levels)

    def policy(self, b=0):
        return ControlPolicy(self, b)


def solve_tree(problem, grid: ControlGrid, N: int, sense=1, allow_stop=True, budget: Budget | None = None):
    """Backward induction for a batch problem on the relative tree of depth ``N``."""
    if N < 0:
        raise ValueError("N must be non-negative")
    if sense not in (1, -1):
        raise ValueError("sense must be 1 (sup) or -1 (inf)")
    budget = budget or Budget.from_env()
    levels = _build(problem, grid, N, budget)
    values, choices = _backward(levels, grid.increment_table(), sense, allow_stop)
    return TreeSolution(grid, N, sense, levels, values, choices, allow_stop)


@dataclass
class ControlPolicy:
    """Optimal node-wise choices for one batch entry of a :class:`TreeSolution`.

    ``choice[k][r]`` is -1 for stop, otherwise an index into ``grid.controls``.
    The choice at a node depends on the node's prefix only, by construction.
    """

    solution: TreeSolution
    batch: int = 0
    _reach: list | None = field(default=None, repr=False)

    @property
    def choices(self):
        return [c[self.batch] for c in self.solution.choices]

    def digest(self):
        h = hashlib.sha256()
        for c in self.choices:
            h.update(np.ascontiguousarray(c, dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()

    def reach_mass(self):
        """Probability of reaching each node under the policy, level by level."""
        if self._reach is None:
            sol = self.solution
            tab = sol.grid.increment_table()
            mass = [np.zeros(len(lv.child_base)) for lv in sol.levels]
            mass[0][0] = 1.0
            for k, lv in enumerate(sol.levels[:-1]):
                ch = self.choices[k]
                for r in np.nonzero((ch >= 0) & (mass[k] > 0))[0]:
                    c = ch[r]
                    for j in range(tab.ctrl_cnt[c]):
                        mass[k + 1][lv.child_base[r] + tab.ctrl_idx[c, j]] += mass[k][r] * tab.ctrl_prob[c, j]
            self._reach = mass
        return self._reach

    def stop_nodes(self):
        """Reachable stop nodes as ``(level, row, probability)``."""
        out = []
        for k, (mass, ch) in enumerate(zip(self.reach_mass(), self.choices)):
            for r in np.nonzero((mass > 0) & (ch < 0))[0]:
                out.append((k, int(r), float(mass[r])))
        return out

    def stop_paths(self):
        """Stack of (level, path) for reachable stop nodes, grouped by level."""
        by_level = {}
        for k, r, _ in self.stop_nodes():
            by_level.setdefault(k, []).append(r)
        return {k: self.solution.levels[k].paths[np.array(rows)] for k, rows in by_level.items()}

    def to_measure(self) -> TreeMeasure:
        """The tree measure that plays this policy (deterministic stopping)."""
        sol = self.solution
        grid = sol.grid
        tab = grid.increment_table()

        def build(node: TreeNode, k, r):
            c = int(self.choices[k][r])
            if c < 0:
                node.stop_mass = 1.0
                return node
            node.stop_mass = 0.0
            node.control = grid.controls[c]
            kids = []
            for j, (p, dA, dM, dQ) in enumerate(grid.branches(c)):
                kids.append((p, build(node.child(p, dA, dM, dQ), k + 1,
                                      sol.levels[k].child_base[r] + tab.ctrl_idx[c, j])))
            node.children = kids
            return node

        return TreeMeasure(build(_root(grid.m), 0, 0), grid, sol.N)


# ---------------------------------------------------------------------------
# public operators


def _as_payoff(f, delta=None):
    return f if isinstance(f, Payoff) else Payoff(f, delta)


def sup_expectation(f, grid: ControlGrid, N: int, budget: Budget | None = None):
    """Upper expectation of ``f`` over the lattice family; returns ``(value, policy)``."""
    f = _as_payoff(f)
    sol = solve_tree(_Single(f, grid.dt), grid, N, 1, True, budget)
    return float(sol.value[0]), sol.policy()


def inf_expectation(f, grid: ControlGrid, N: int, budget: Budget | None = None):
    """Lower expectation of ``f``; returns ``(value, policy)``."""
    f = _as_payoff(f)
    sol = solve_tree(_Single(f, grid.dt), grid, N, -1, True, budget)
    return float(sol.value[0]), sol.policy()


def _prefix_stack(nodes, N, m):
    out = []
    for nd in nodes:
        if isinstance(nd, SpaceTimePoint):
            v = nd.path.values
        elif isinstance(nd, TreeNode):
            v = nd.prefix_b
        elif isinstance(nd, Path):
            v = nd.values
        else:
            v = np.asarray(nd, dtype=float)
            if v.ndim == 1:
                v = v[:, None]
        if len(v) < N + 1:
            v = np.vstack([v, np.repeat(v[-1:], N + 1 - len(v), axis=0)])
        out.append(v[: N + 1])
    arr = np.array(out, dtype=float).reshape(len(out), N + 1, -1)
    if arr.shape[2] != m:
        raise ValueError("node dimension does not match the grid")
    return arr


def conditional_sup_batch(f, grid: ControlGrid, N: int, tau_index: int, prefixes, sense=1,
                          budget: Budget | None = None):
    """Conditional upper (``sense=1``) or lower expectation at many nodes of depth ``tau_index``.

    ``prefixes`` is a stack ``(n, >= tau_index+1, m)`` of B paths; each node's value
    is the optimum of the shifted payoff over the remaining ``N - tau_index`` steps.
    """
    f = _as_payoff(f)
    if not 0 <= tau_index <= N:
        raise ValueError(f"depth overflow: tau_index {tau_index} outside [0, {N}]")
    prefixes = np.asarray(prefixes, dtype=float)
    if prefixes.ndim == 2:
        prefixes = prefixes[:, :, None]
    base = _prefix_stack(list(prefixes), N, grid.m)
    sol = solve_tree(_Shifted(f, base, tau_index, N, grid.dt), grid, N - tau_index, sense, True, budget)
    return sol.value


def conditional_sup(f, grid: ControlGrid, N: int, tau_index: int, node, budget: Budget | None = None):
    """Conditional upper expectation at one node (a prefix array, Path, SpaceTimePoint or TreeNode)."""
    base = _prefix_stack([node], N, grid.m)
    return float(conditional_sup_batch(f, grid, N, tau_index, base, budget=budget)[0])


class _Terminal:
    """A terminal functional read at the horizon on ``base ⊗_tau paths``; no stopping."""

    def __init__(self, xi: PathFunctional, base, tau, N, dt):
        self.xi, self.tau, self.N, self.dt = xi, tau, N, dt
        self.base = freeze(base, tau)
        self.nb = base.shape[0]

    def values(self, k, paths):
        if self.tau + k < self.N:
            return np.zeros((self.nb, len(paths)))
        full = concat_values(self.base[:, None], self.tau, paths[None], self.N)
        vals = self.xi.batch(self.N, full.reshape(-1, *full.shape[2:]), self.dt)
        return vals.reshape(self.nb, -1)

    def absorbed(self, k, paths):
        return np.zeros((self.nb, len(paths)), dtype=bool)


def terminal_expectation_batch(xi, grid: ControlGrid, N: int, t_index: int, prefixes, sense=-1,
                               budget: Budget | None = None):
    """Optimal expectation of ``xi(B)`` at the fixed horizon, conditional on each prefix.

    No stopping is allowed; ``sense=-1`` gives the lower, ``sense=1`` the upper
    expectation. With a single-control grid this is a plain linear expectation.
    """
    if not 0 <= t_index <= N:
        raise ValueError(f"t_index {t_index} outside [0, {N}]")
    prefixes = np.asarray(prefixes, dtype=float)
    if prefixes.ndim == 2:
        prefixes = prefixes[:, :, None]
    base = _prefix_stack(list(prefixes), N, grid.m)
    sol = solve_tree(_Terminal(xi, base, t_index, N, grid.dt), grid, N - t_index, sense, False, budget)
    return sol.value


class _StopWith:
    """Stop values ``f`` before ``tau`` and the conditional value at and after it."""

    def __init__(self, f: Payoff, grid, N, tau, everywhere, budget):
        self.f, self.grid, self.N, self.tau = f, grid, N, tau
        self.everywhere, self.budget, self.nb = everywhere, budget, 1

    def _cond(self, k):
        return self.everywhere or k >= self.tau

    def values(self, k, paths):
        if self._cond(k):
            return conditional_sup_batch(self.f, self.grid, self.N, k, paths, budget=self.budget)[None]
        return self.f.batch(k, paths, self.grid.dt)[None]

    def absorbed(self, k, paths):
        if not self.everywhere and k >= self.tau:
            return np.ones((1, len(paths)), dtype=bool)
        return self.f.absorbed(k, paths, self.grid.dt)[None]


@dataclass
class DPPReport:
    """Both sides of the dynamic programming identities and the a.s. certificate."""

    lhs_tau: float
    lhs_T: float
    rhs: float
    gap: float
    as_gap: float
    n_stop_nodes: int
    tolerance: float

    @property
    def lhs(self):
        return self.lhs_tau

    @property
    def passed(self):
        return self.gap <= self.tolerance and self.as_gap <= self.tolerance

    def to_dict(self):
        return {"lhs_tau": self.lhs_tau, "lhs_T": self.lhs_T, "rhs": self.rhs, "gap": self.gap,
                "as_gap": self.as_gap, "n_stop_nodes": self.n_stop_nodes, "tolerance": self.tolerance,
                "pass": self.passed}


def dpp_check(f, grid: ControlGrid, N: int, tau_index: int, tol=1e-12, budget: Budget | None = None):
    """Evaluate both dynamic programming identities and the stop-node certificate.

    ``lhs_tau`` pastes the conditional value at depth ``tau_index`` onto the
    upper expectation before it; ``lhs_T`` replaces the payoff by its conditional
    value at every stop; ``rhs`` is the plain upper expectation. At every reachable
    stop node of the optimal policy the payoff must equal its conditional value.
    """
    f = _as_payoff(f)
    if not 0 <= tau_index <= N:
        raise ValueError(f"tau_index {tau_index} outside [0, {N}]")
    budget = budget or Budget.from_env()
    rhs_sol = solve_tree(_Single(f, grid.dt), grid, N, 1, True, budget)
    rhs = float(rhs_sol.value[0])
    lhs_tau = float(solve_tree(_StopWith(f, grid, N, tau_index, False, budget), grid, N, 1, True, budget).value[0])
    lhs_T = float(solve_tree(_StopWith(f, grid, N, tau_index, True, budget), grid, N, 1, True, budget).value[0])
    as_gap, count = 0.0, 0
    for k, paths in rhs_sol.policy().stop_paths().items():
        cond = conditional_sup_batch(f, grid, N, k, paths, budget=budget)
        here = f.batch(k, paths, grid.dt)
        as_gap = max(as_gap, float(np.max(np.abs(cond - here))))
        count += len(paths)
    gap = max(abs(lhs_tau - rhs), abs(lhs_T - rhs))
    return DPPReport(lhs_tau, lhs_T, rhs, gap, as_gap, count, tol)


def pure_stopping_sup(f, grid: ControlGrid, N: int, method="policy-iteration", max_free_nodes=12,
                      budget: Budget | None = None):
    """Optimum over deterministic adapted stopping rules, then over controls.

    ``method='policy-iteration'`` improves a stopping region until it is stable;
    ``method='enumerate'`` tries every stopping region on the free (non-absorbed,
    non-terminal) nodes and is limited to ``max_free_nodes`` of them.
    """
    f = _as_payoff(f)
    budget = budget or Budget.from_env()
    levels = _build(_Single(f, grid.dt), grid, N, budget)
    table = grid.increment_table()
    free = [~(lv.absorbed[0] | (lv.child_base < 0)) for lv in levels]

    def value_of(region):
        extra = [r[None] for r in region]
        vals, _ = _backward(levels, table, 1, False, extra)
        return vals

    if method == "enumerate":
        slots = [(k, r) for k, fr in enumerate(free) for r in np.nonzero(fr)[0]]
        if len(slots) > max_free_nodes:
            raise BudgetExceeded(f"budget exceeded: {len(slots)} free nodes, enumeration capped at {max_free_nodes}")
        best = -np.inf
        for bits in itertools.product((False, True), repeat=len(slots)):
            region = [np.zeros(len(fr), dtype=bool) for fr in free]
            for (k, r), b in zip(slots, bits):
                region[k][r] = b
            best = max(best, float(value_of(region)[0][0, 0]))
        return best
    if method != "policy-iteration":
        raise ValueError(f"unknown method {method!r}")
    region = [np.zeros(len(fr), dtype=bool) for fr in free]
    I = table.increments.shape[0]
    for _ in range(N + 2):
        vals = value_of(region)
        new = []
        for k, lv in enumerate(levels):
            nxt = vals[k + 1] if k + 1 < len(levels) else None
            child = _child_matrix(lv, nxt, I)
            cont, _ = kernels.reduce_level(child[0], table.ctrl_idx, table.ctrl_prob, table.ctrl_cnt,
                                           lv.values[0], ~free[k], False, 1)
            new.append(free[k] & (lv.values[0] >= cont))
        if all(np.array_equal(a, b) for a, b in zip(new, region)):
            break
        region = new
    return float(value_of(region)[0][0, 0])

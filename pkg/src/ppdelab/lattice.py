"""Finite scenario lattices standing in for the bounded-control measure family.

A :class:`ControlGrid` fixes the admissible per-step controls: a drift ``b`` with
``|b| <= L`` and a quadratic-variation rate ``c`` (positive semidefinite, entries
bounded by ``L``). Under control ``(b, c)`` one step moves

    A += b dt,   M += xi,   Q += c dt,   B = A + M,

where ``xi`` is a symmetric two-point (or trinomial) increment with mean 0 and
covariance ``c dt``. A :class:`TreeMeasure` is an explicit non-recombining tree of
such steps with a stopping mass at every node.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .pathspace import concat_values

__all__ = [
    "BudgetExceeded", "Budget", "ControlGrid", "IncrementTable", "TreeNode", "TreeMeasure",
    "count_measures", "enumerate_measures", "enumerate_expectations", "measure_from_rule",
    "concat_measure", "tower_expectation", "point_mass", "ScenarioSample", "sample_scenarios",
    "sample_scenario",
]

_TOL = 1e-12


class BudgetExceeded(ValueError):
    """Raised when a lattice computation would exceed the configured desk-scale budget."""


@dataclass(frozen=True)
class Budget:
    """Desk-scale caps on lattice sizes.

    ``max_nodes`` can be overridden with the ``PPDE_BUDGET`` environment variable.
    """

    max_steps: int = 12
    max_drift: int = 5
    max_var: int = 3
    max_enum_steps: int = 4
    max_nodes: int = 2_000_000
    max_measures: int = 2_000_000

    @classmethod
    def from_env(cls, **overrides):
        env = os.environ.get("PPDE_BUDGET")
        if env and "max_nodes" not in overrides:
            try:
                overrides["max_nodes"] = int(float(env))
            except ValueError:
                raise BudgetExceeded(f"PPDE_BUDGET must be an integer, got {env!r}") from None
        return cls(**overrides)

    @property
    def grid_cap(self):
        return self.max_steps * self.max_drift * self.max_var

    def check_grid(self, N, n_drift, n_var):
        """Apply the rule N <= max_steps, |drift| <= max_drift, |var| <= max_var."""
        product = N * n_drift * n_var
        if N > self.max_steps or n_drift > self.max_drift or n_var > self.max_var:
            raise BudgetExceeded(
                f"budget exceeded: N={N}, |drift grid|={n_drift}, |var grid|={n_var} "
                f"(N*|grids| = {product}); caps are N<={self.max_steps}, "
                f"|drift|<={self.max_drift}, |var|<={self.max_var} (N*|grids| <= {self.grid_cap})")

    def check_nodes(self, count):
        if count > self.max_nodes:
            raise BudgetExceeded(f"budget exceeded: tree needs {count} nodes, cap is {self.max_nodes} "
                                 "(raise with PPDE_BUDGET)")

    def check_enum(self, N, count):
        if N > self.max_enum_steps:
            raise BudgetExceeded(f"budget exceeded: exhaustive enumeration is capped at N<={self.max_enum_steps}, got N={N}")
        if count > self.max_measures:
            raise BudgetExceeded(f"budget exceeded: {count} measures to enumerate, cap is {self.max_measures}")


@dataclass(frozen=True)
class IncrementTable:
    """Distinct B-increments of a grid and, per control, the branches that use them."""

    increments: np.ndarray  # (I, m)
    ctrl_idx: np.ndarray  # (K, J) column into increments
    ctrl_prob: np.ndarray  # (K, J)
    ctrl_cnt: np.ndarray  # (K,)


class ControlGrid:
    """Admissible per-step controls of the lattice.

    Parameters
    ----------
    L : float
        Bound on the drift norm and on the entries of the variance rate.
    dt : float
        Time step.
    drifts : array_like, shape (Kd,) or (Kd, m)
    variances : array_like, shape (Kv,) or (Kv, m, m)
    branching : {'binomial', 'trinomial'}
        Martingale increments: symmetric two-point (along the columns of the square
        root of ``c dt`` when m > 1) or the three-point rule (m = 1 only).
    """

    def __init__(self, L, dt, drifts, variances, branching="binomial"):
        if not L > 0 or not dt > 0:
            raise ValueError("L and dt must be positive")
        d = np.array(drifts, dtype=float)
        v = np.array(variances, dtype=float)
        if d.size == 0:
            raise ValueError("drift grid is empty")
        if v.size == 0:
            raise ValueError("variance grid is empty")
        if d.ndim == 1:
            d = d[:, None]
        if v.ndim == 1:
            v = v[:, None, None]
        m = d.shape[1]
        if v.shape[1:] != (m, m):
            raise ValueError("variance matrices must be (m, m) with m matching the drifts")
        if branching not in ("binomial", "trinomial"):
            raise ValueError(f"unknown branching rule {branching!r}")
        if branching == "trinomial" and m != 1:
            raise ValueError("trinomial branching is available for m = 1 only")
        tol = 1e-12 * max(1.0, L)
        for b in d:
            if np.linalg.norm(b) > L + tol:
                raise ValueError(f"drift {b} exceeds the bound L={L}")
        for c in v:
            if not np.array_equal(c, c.T):
                raise ValueError("variance rates must be symmetric")
            if np.linalg.eigvalsh(c).min() < -tol or np.abs(c).max() > L + tol:
                raise ValueError(f"variance rate {c.tolist()} is not in [0, L]")
        d = np.unique(d, axis=0)
        flat = np.unique(v.reshape(len(v), -1), axis=0)
        self.L = float(L)
        self.dt = float(dt)
        self.drifts = d
        self.variances = flat.reshape(-1, m, m)
        self.branching = branching
        self.controls = [(i, j) for i in range(len(d)) for j in range(len(self.variances))]
        self._table = None

    @classmethod
    def symmetric(cls, L, dt, n_drift=3, n_var=2, m=1, branching="binomial"):
        """Evenly spaced grids: drifts in [-L, L] and variance rates in [0, L].

        For m > 1 the drift grid is the product grid scaled into the Euclidean ball and
        the variance rates are multiples of the identity.
        """
        lev = np.linspace(-1.0, 1.0, n_drift) if n_drift > 1 else np.zeros(1)
        if m == 1:
            drifts = L * lev
        else:
            drifts = L * np.array(list(itertools.product(lev, repeat=m))) / np.sqrt(m)
        rates = np.linspace(0.0, L, n_var) if n_var > 1 else np.array([L])
        variances = np.array([r * np.eye(m) for r in rates])
        return cls(L, dt, drifts, variances, branching)

    @property
    def m(self):
        return self.drifts.shape[1]

    def __repr__(self):
        return (f"ControlGrid(L={self.L:g}, dt={self.dt:g}, m={self.m}, "
                f"|drift|={len(self.drifts)}, |var|={len(self.variances)}, {self.branching})")

    def describe(self):
        return {"L": self.L, "dt": self.dt, "m": self.m, "branching": self.branching,
                "drifts": self.drifts.tolist(), "variances": self.variances.tolist()}

    def martingale_branches(self, vi):
        """Probabilities ``(J,)`` and increments ``(J, m)`` of the martingale step for rate ``vi``.

        Coinciding points are merged, so a zero rate gives a single branch.
        """
        c = self.variances[vi] * self.dt
        m = self.m
        if self.branching == "trinomial":
            h = np.sqrt(3.0 * c[0, 0])
            pts = np.array([[-h], [0.0], [h]])
            probs = np.array([1 / 6, 2 / 3, 1 / 6])
        else:
            w, U = np.linalg.eigh(c)
            S = U * np.sqrt(np.clip(w, 0.0, None))
            cols = np.sqrt(m) * S.T  # (m, m): rows are the directions
            pts = np.concatenate([cols, -cols])
            probs = np.full(2 * m, 1.0 / (2 * m))
            if m == 1:
                pts = np.array([[np.sqrt(c[0, 0])], [-np.sqrt(c[0, 0])]])
        merged = {}
        for p, x in zip(probs, pts):
            key = tuple(np.round(x, 15) + 0.0)
            if key in merged:
                merged[key][0] += p
            else:
                merged[key] = [p, x]
        items = sorted(merged.values(), key=lambda e: tuple(e[1]))
        return np.array([e[0] for e in items]), np.array([e[1] for e in items])

    def branches(self, ci):
        """List of ``(prob, dA, dM, dQ)`` for control index ``ci``."""
        di, vi = self.controls[ci]
        probs, xis = self.martingale_branches(vi)
        dA = self.drifts[di] * self.dt
        dQ = self.variances[vi] * self.dt
        return [(float(p), dA, x, dQ) for p, x in zip(probs, xis)]

    def increment_table(self) -> IncrementTable:
        if self._table is None:
            rows, owners = [], []
            for ci in range(len(self.controls)):
                for p, dA, dM, _ in self.branches(ci):
                    rows.append(dA + dM)
                    owners.append((ci, p))
            rows = np.array(rows)
            incs, inverse = np.unique(rows, axis=0, return_inverse=True)
            inverse = np.asarray(inverse).reshape(-1)
            K = len(self.controls)
            J = max(sum(1 for o in owners if o[0] == k) for k in range(K))
            idx = np.zeros((K, J), dtype=np.int64)
            prob = np.zeros((K, J))
            cnt = np.zeros(K, dtype=np.int64)
            for (ci, p), col in zip(owners, inverse):
                idx[ci, cnt[ci]] = col
                prob[ci, cnt[ci]] = p
                cnt[ci] += 1
            self._table = IncrementTable(incs, idx, prob, cnt)
        return self._table


# ---------------------------------------------------------------------------
# explicit tree measures


@dataclass(eq=False)
class TreeNode:
    """A node of an explicit tree measure; prefixes include the node's own time."""

    depth: int
    prefix_b: np.ndarray  # (depth+1, m)
    prefix_a: np.ndarray
    prefix_m: np.ndarray
    prefix_q: np.ndarray  # (depth+1, m, m)
    children: list = field(default_factory=list)  # [(prob, TreeNode)]
    stop_mass: float = 1.0
    control: tuple | None = None  # (drift index, variance index)

    def child(self, prob, dA, dM, dQ, **kw):
        return TreeNode(
            self.depth + 1,
            np.vstack([self.prefix_b, self.prefix_b[-1] + (dA + dM)]),
            np.vstack([self.prefix_a, self.prefix_a[-1] + dA]),
            np.vstack([self.prefix_m, self.prefix_m[-1] + dM]),
            np.concatenate([self.prefix_q, (self.prefix_q[-1] + dQ)[None]]),
            **kw,
        )


def _root(m):
    z = np.zeros((1, m))
    return TreeNode(0, z, z.copy(), z.copy(), np.zeros((1, m, m)))


def _frozen(prefix, N):
    return np.vstack([prefix, np.repeat(prefix[-1:], N + 1 - len(prefix), axis=0)])


@dataclass(eq=False)
class TreeMeasure:
    """A probability on scenario trees: paths, control marks and randomized stopping."""

    root: TreeNode
    grid: ControlGrid
    depth_max: int

    @property
    def L(self):
        return self.grid.L

    def nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(c for _, c in reversed(node.children))

    def outcomes(self):
        """Stop events ``(probability, node)`` with positive probability, in depth-first order."""
        out = []

        def walk(node, mass):
            if mass <= 0.0:
                return
            if node.stop_mass > 0.0:
                out.append((mass * node.stop_mass, node))
            if node.stop_mass < 1.0:
                for p, c in node.children:
                    walk(c, mass * (1.0 - node.stop_mass) * p)

        walk(self.root, 1.0)
        return out

    def expectation(self, payoff):
        """Exact expectation of ``payoff`` evaluated at (stop index, B path)."""
        outs = self.outcomes()
        probs = np.array([p for p, _ in outs])
        t = np.array([n.depth for _, n in outs])
        paths = np.array([_frozen(n.prefix_b, self.depth_max) for _, n in outs])
        vals = payoff.batch(t, paths, self.grid.dt)
        return float(np.dot(probs, vals))

    def stop_time_mean(self):
        return float(sum(p * n.depth * self.grid.dt for p, n in self.outcomes()))

    def validate(self, tol=_TOL):
        """Check every node invariant; raise ValueError on the first failure."""
        g = self.grid
        L = g.L
        total = sum(p for p, _ in self.outcomes())
        if abs(total - 1.0) > tol:
            raise ValueError(f"total stopping mass {total} != 1")
        for node in self.nodes():
            if node.depth > self.depth_max:
                raise ValueError("node deeper than depth_max")
            if np.max(np.abs(node.prefix_b - node.prefix_a - node.prefix_m)) > tol:
                raise ValueError(f"B != A + M at depth {node.depth}")
            if not 0.0 <= node.stop_mass <= 1.0:
                raise ValueError("stop mass outside [0, 1]")
            if not node.children:
                if node.stop_mass != 1.0:
                    raise ValueError("childless node must stop with mass 1")
                continue
            if node.depth == self.depth_max:
                raise ValueError("node at the horizon has children")
            probs = np.array([p for p, _ in node.children])
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > tol:
                raise ValueError("branch probabilities must sum to 1")
            dM = np.array([c.prefix_m[-1] - node.prefix_m[-1] for _, c in node.children])
            dA = np.array([c.prefix_a[-1] - node.prefix_a[-1] for _, c in node.children])
            dQ = np.array([c.prefix_q[-1] - node.prefix_q[-1] for _, c in node.children])
            if np.max(np.abs(probs @ dM)) > tol:
                raise ValueError(f"martingale increment has nonzero mean at depth {node.depth}")
            cov = np.einsum("j,ji,jk->ik", probs, dM, dM)
            for q in dQ:
                if np.max(np.abs(cov - q)) > tol:
                    raise ValueError(f"E[dM dM^T] != dQ at depth {node.depth}")
                if np.linalg.eigvalsh(q).min() < -tol or np.abs(q).max() / g.dt > L * (1 + tol):
                    raise ValueError("variance-rate bound violated")
            for a in dA:
                if np.linalg.norm(a) / g.dt > L * (1 + tol):
                    raise ValueError("drift bound violated")
        return True

    def to_json(self):
        nodes, ids = [], {}
        for k, node in enumerate(self.nodes()):
            ids[id(node)] = k
        for node in self.nodes():
            nodes.append({
                "id": ids[id(node)],
                "depth": node.depth,
                "stop_mass": node.stop_mass,
                "control": None if node.control is None else list(node.control),
                "b": node.prefix_b.tolist(),
                "a": node.prefix_a.tolist(),
                "m": node.prefix_m.tolist(),
                "q": node.prefix_q.tolist(),
                "children": [[p, ids[id(c)]] for p, c in node.children],
            })
        return json.dumps({"L": self.L, "dt": self.grid.dt, "depth_max": self.depth_max,
                           "grid": self.grid.describe(), "nodes": nodes}, sort_keys=True)


def point_mass(grid: ControlGrid, depth_max=0):
    """The measure that stops immediately at the origin."""
    return TreeMeasure(_root(grid.m), grid, depth_max)


def measure_from_rule(grid: ControlGrid, N: int, rule):
    """Build the tree measure driven by ``rule(node) -> (stop_mass, control index or None)``."""

    def build(node):
        if node.depth == N:
            node.stop_mass = 1.0
            return node
        stop_mass, ci = rule(node)
        node.stop_mass = float(stop_mass)
        if stop_mass < 1.0:
            node.control = grid.controls[ci]
            node.children = [(p, build(node.child(p, dA, dM, dQ))) for p, dA, dM, dQ in grid.branches(ci)]
        return node

    return TreeMeasure(build(_root(grid.m)), grid, N)


# ---------------------------------------------------------------------------
# exhaustive enumeration (brute-force oracles)


def count_measures(grid: ControlGrid, N: int, n_stop_levels=2):
    """Number of measures with node-wise controls and ``n_stop_levels`` stop masses (incl. 0 and 1)."""
    fan = [len(grid.branches(ci)) for ci in range(len(grid.controls))]
    c = 1
    for _ in range(N):
        c = 1 + (n_stop_levels - 1) * sum(c ** j for j in fan)
    return c


def enumerate_measures(grid: ControlGrid, N: int, budget: Budget | None = None):
    """Lazily yield every measure with node-wise controls and {0, 1} stop decisions.

    Order: at each node first "stop", then the controls in grid order, children
    combined in itertools.product order.
    """
    budget = budget or Budget.from_env()
    budget.check_enum(N, count_measures(grid, N))

    def subtrees(node):
        yield TreeNode(node.depth, node.prefix_b, node.prefix_a, node.prefix_m, node.prefix_q, [], 1.0, None)
        if node.depth == N:
            return
        for ci in range(len(grid.controls)):
            br = grid.branches(ci)
            kids = [list(subtrees(node.child(p, dA, dM, dQ))) for p, dA, dM, dQ in br]
            for combo in itertools.product(*kids):
                yield TreeNode(node.depth, node.prefix_b, node.prefix_a, node.prefix_m, node.prefix_q,
                               [(b[0], c) for b, c in zip(br, combo)], 0.0, grid.controls[ci])

    for root in subtrees(_root(grid.m)):
        yield TreeMeasure(root, grid, N)


def enumerate_expectations(payoff, grid: ControlGrid, N: int, stop_masses=(1.0, 0.0),
                           budget: Budget | None = None):
    """Expectations of ``payoff`` under every enumerated measure, computed leaf-up.

    With the default stop masses the order matches :func:`enumerate_measures`.
    Other stop masses (e.g. ``(1.0, 0.0, 0.5)``) enumerate randomized stopping:
    mass 1 yields the stop value, any other mass ``s`` yields ``s f + (1-s) E[child]``
    for every control and child combination.
    """
    budget = budget or Budget.from_env()
    budget.check_enum(N, count_measures(grid, N, len(stop_masses)))
    branches = [grid.branches(ci) for ci in range(len(grid.controls))]

    def values(depth, b):
        f = float(payoff.batch(np.array([depth]), _frozen(b, N)[None], grid.dt)[0])
        out = []
        for s in stop_masses:
            if s == 1.0:
                out.append(np.array([f]))
                continue
            if depth == N:
                continue
            for br in branches:
                acc = np.zeros(1)
                for p, dA, dM, _ in br:
                    kid = values(depth + 1, np.vstack([b, b[-1] + (dA + dM)]))
                    acc = np.add.outer(acc, p * kid).reshape(-1)
                out.append(s * f + (1.0 - s) * acc)
        return np.concatenate(out)

    return values(0, np.zeros((1, grid.m)))


# ---------------------------------------------------------------------------
# concatenation of measures


def _shift_node(sub: TreeNode, base: TreeNode):
    k = base.depth
    m = base.prefix_b.shape[1]

    def q_concat(bq, sq):
        flat = concat_values(bq.reshape(len(bq), -1), k, sq.reshape(len(sq), -1), k + len(sq) - 1)
        return flat.reshape(-1, m, m)

    def shift(node):
        N = k + node.depth
        return TreeNode(
            N,
            concat_values(base.prefix_b, k, node.prefix_b, N),
            concat_values(base.prefix_a, k, node.prefix_a, N),
            concat_values(base.prefix_m, k, node.prefix_m, N),
            q_concat(base.prefix_q, node.prefix_q),
            [(p, shift(c)) for p, c in node.children],
            node.stop_mass,
            node.control,
        )

    return shift(sub)


def concat_measure(P: TreeMeasure, tau, nu) -> TreeMeasure:
    """Paste continuation measures onto ``P`` at the stopping rule ``tau``.

    ``tau(node) -> bool`` marks the nodes where the pasting happens; it is read top
    down, so only the first marked node on each branch counts. Scenarios that stop
    before reaching a marked node keep their stop. At a marked node the whole
    remaining law (its stop mass included) is replaced by ``nu(node)`` with paths
    concatenated onto the node's prefixes.
    """

    def paste(node):
        if tau(node):
            sub = nu(node)
            if sub.grid.m != P.grid.m or abs(sub.grid.dt - P.grid.dt) > _TOL * P.grid.dt:
                raise ValueError("continuation measure has a different grid")
            if node.depth + sub.depth_max > P.depth_max:
                raise ValueError(
                    f"horizon overflow: graft at depth {node.depth} with depth {sub.depth_max} exceeds {P.depth_max}")
            return _shift_node(sub.root, node)
        return TreeNode(node.depth, node.prefix_b, node.prefix_a, node.prefix_m, node.prefix_q,
                        [(p, paste(c)) for p, c in node.children], node.stop_mass, node.control)

    return TreeMeasure(paste(P.root), P.grid, P.depth_max)


def tower_expectation(P: TreeMeasure, tau, nu, payoff):
    """Iterated expectation: outer law ``P`` up to ``tau``, inner laws ``nu`` on the shifted payoff."""
    N = P.depth_max
    dt = P.grid.dt

    def inner(node):
        sub = nu(node)
        k = node.depth
        outs = sub.outcomes()
        probs = np.array([p for p, _ in outs])
        t = np.array([k + n.depth for _, n in outs])
        paths = np.array([_frozen(concat_values(node.prefix_b, k, n.prefix_b, k + n.depth), N) for _, n in outs])
        return float(np.dot(probs, payoff.batch(t, paths, dt)))

    def rec(node):
        if tau(node):
            return inner(node)
        val = 0.0
        if node.stop_mass > 0.0:
            f = payoff.batch(np.array([node.depth]), _frozen(node.prefix_b, N)[None], dt)[0]
            val += node.stop_mass * float(f)
        if node.stop_mass < 1.0:
            val += (1.0 - node.stop_mass) * sum(p * rec(c) for p, c in node.children)
        return val

    return rec(P.root)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class ScenarioSample:
    """Independent draws from a tree measure; paths are frozen after the stop index."""

    stop_index: np.ndarray  # (n,)
    B: np.ndarray  # (n, N+1, m)
    A: np.ndarray
    M: np.ndarray
    Q: np.ndarray  # (n, N+1, m, m)
    dt: float

    def __len__(self):
        return len(self.stop_index)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n, P, m = self.B.shape
        head = ["draw", "stop_index", "k"]
        for name in ("B", "A", "M"):
            head += [f"{name}{i + 1}" for i in range(m)]
        w.writerow(head)
        for d in range(n):
            for k in range(P):
                row = [d, int(self.stop_index[d]), k]
                for arr in (self.B, self.A, self.M):
                    row += [repr(float(x)) for x in arr[d, k]]
                w.writerow(row)
        return buf.getvalue()


def sample_scenarios(P: TreeMeasure, n: int, seed) -> ScenarioSample:
    """Draw ``n`` scenarios (stop index and paths) with a seeded generator."""
    rng = np.random.default_rng(seed)
    outs = P.outcomes()
    probs = np.array([p for p, _ in outs])
    pick = rng.choice(len(outs), size=n, p=probs / probs.sum())
    N = P.depth_max
    nodes = [o[1] for o in outs]
    stacked = {k: np.array([_frozen(getattr(nd, f"prefix_{k}"), N) for nd in nodes]) for k in "bam"}
    Qs = np.array([np.concatenate([nd.prefix_q, np.repeat(nd.prefix_q[-1:], N + 1 - len(nd.prefix_q), axis=0)])
                   for nd in nodes])
    stops = np.array([nd.depth for nd in nodes])
    return ScenarioSample(stops[pick], stacked["b"][pick], stacked["a"][pick], stacked["m"][pick], Qs[pick],
                          P.grid.dt)


def sample_scenario(P: TreeMeasure, seed):
    """One draw: ``(stop index, B, A, M, Q)`` with paths frozen after the stop."""
    s = sample_scenarios(P, 1, seed)
    return int(s.stop_index[0]), s.B[0], s.A[0], s.M[0], s.Q[0]

"""Sup/inf-convolution in the backward p-metric and the comparison pipeline built on it.

The supremum over all space-time points is replaced by a maximum over a finite
search set, so every ``u^n`` here is a lower bound of its continuum counterpart
(``v_n`` an upper bound). Search sets should be closed under one-step
extension by the lattice increments used in the jet tests; the nodes of a
reference tree (:func:`reference_tree_points`) are.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .lattice import ControlGrid
from .pathspace import Path, PathFunctional, SpaceTimePoint, backward_features, freeze_rows
from .viscosity import (GFunction, check_subsolution, check_supersolution, default_jet_grid,
                        rho_estimate)

__all__ = [
    "PointSet", "reference_tree_points", "ConvolutionResult", "sup_convolution", "inf_convolution",
    "lipschitz_excess", "TerminalReport", "terminal_lipschitz_constant", "terminal_consistency_check",
    "shifted_approximant", "residual_bound_check", "ResidualReport", "comparison_pipeline",
    "ComparisonReport", "envelope_functional",
]

_ROW_CHUNK = 512


class PointSet:
    """A finite, ordered set of grid space-time points sharing one grid.

    Paths are stored frozen after their time index, shape ``(n, N+1, m)``.
    """

    def __init__(self, t_idx, paths, dt):
        t_idx = np.asarray(t_idx, dtype=np.int64)
        paths = np.asarray(paths, dtype=float)
        if paths.ndim == 2:
            paths = paths[:, :, None]
        if len(t_idx) == 0:
            raise ValueError("point set is empty")
        if paths.shape[0] != len(t_idx):
            raise ValueError("one path per time index is required")
        self.t_idx = t_idx
        self.paths = freeze_rows(paths, t_idx)
        self.dt = float(dt)
        self._feats = None

    @classmethod
    def from_points(cls, points):
        points = list(points)
        if not points:
            raise ValueError("point set is empty")
        return cls([p.t_index for p in points], np.array([p.frozen_values() for p in points]), points[0].dt)

    def __len__(self):
        return len(self.t_idx)

    @property
    def N(self):
        return self.paths.shape[1] - 1

    @property
    def m(self):
        return self.paths.shape[2]

    @property
    def times(self):
        return self.t_idx * self.dt

    def point(self, i):
        return SpaceTimePoint(int(self.t_idx[i]), Path(self.paths[i], self.dt))

    def points(self):
        return [self.point(i) for i in range(len(self))]

    def features(self):
        if self._feats is None:
            self._feats = backward_features(self.t_idx, self.paths, self.N)
        return self._feats

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return PointSet(self.t_idx[idx], self.paths[idx], self.dt)

    def union(self, other: "PointSet"):
        return PointSet(np.concatenate([self.t_idx, other.t_idx]), np.concatenate([self.paths, other.paths]),
                        self.dt)

    def terminal(self):
        return np.nonzero(self.t_idx == self.N)[0]

    def keys(self):
        return [(int(t), p[: t + 1].tobytes()) for t, p in zip(self.t_idx, self.paths)]

    def digest(self):
        h = hashlib.sha256()
        h.update(self.t_idx.tobytes())
        h.update(np.ascontiguousarray(self.paths).tobytes())
        return h.hexdigest()

    def evaluate(self, u: PathFunctional):
        return u.batch(self.t_idx, self.paths, self.dt)


def reference_tree_points(grid: ControlGrid, N: int, max_points=200_000) -> PointSet:
    """Every node of the non-recombining tree generated by the grid's distinct increments."""
    incs = grid.increment_table().increments
    I, m = incs.shape
    total = sum(I ** k for k in range(N + 1))
    if total > max_points:
        raise ValueError(f"reference tree has {total} nodes, cap is {max_points}")
    paths = np.zeros((1, N + 1, m))
    all_t, all_p = [np.zeros(1, dtype=np.int64)], [paths]
    for k in range(N):
        nxt = np.repeat(paths, I, axis=0)
        nxt[:, k + 1:, :] += np.tile(incs, (len(paths), 1))[:, None, :]
        paths = nxt
        all_t.append(np.full(len(paths), k + 1, dtype=np.int64))
        all_p.append(paths)
    return PointSet(np.concatenate(all_t), np.concatenate(all_p), grid.dt)


def _envelope(eval_set: PointSet, search: PointSet, values, n, p, sense):
    out = np.empty(len(eval_set))
    arg = np.empty(len(eval_set), dtype=np.int64)
    A, ta = eval_set.features(), eval_set.times
    B, tb = search.features(), search.times
    for lo in range(0, len(eval_set), _ROW_CHUNK):
        hi = min(lo + _ROW_CHUNK, len(eval_set))
        out[lo:hi], arg[lo:hi] = kernels.envelope(A[lo:hi], ta[lo:hi], B, tb, values, n, eval_set.dt, p, sense)
    return out, arg


@dataclass
class ConvolutionResult:
    """Tabulated sup (``sense=1``) or inf (``sense=-1``) convolution on an evaluation set."""

    values: np.ndarray
    n: float
    argmax: np.ndarray  # index into the search set
    eval_set: PointSet
    search_set: PointSet
    search_values: np.ndarray
    p: float
    sense: int

    @property
    def search_digest(self):
        return self.search_set.digest()

    def functional(self):
        """``u_n`` at arbitrary points of the grid, computed against the same search set."""
        return envelope_functional(self.search_set, self.search_values, self.n, self.p, self.sense)


def envelope_functional(search: PointSet, values, n, p=1.0, sense=1):
    values = np.asarray(values, dtype=float)

    def batch(t_idx, paths, dt):
        pts = PointSet(t_idx, paths, dt)
        return _envelope(pts, search, values, n, p, sense)[0]

    return PathFunctional(batch, f"{'sup' if sense > 0 else 'inf'}conv(n={n:g})")


def _convolve(u, n, search_set, eval_set, p, sense):
    if search_set is None or len(search_set) == 0:
        raise ValueError("search set is empty")
    eval_set = search_set if eval_set is None else eval_set
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    if eval_set is not search_set:
        known = set(search_set.keys())
        if any(k not in known for k in eval_set.keys()):
            raise ValueError("the search set must contain the evaluation set")
    if not n > 0:
        raise ValueError("n must be positive")
    vals = search_set.evaluate(u) if isinstance(u, PathFunctional) else np.asarray(u, dtype=float)
    if vals.shape != (len(search_set),) or not np.all(np.isfinite(vals)):
        raise ValueError("u must be finite on the search set")
    out, arg = _envelope(eval_set, search_set, vals, float(n), float(p), sense)
    return ConvolutionResult(out, float(n), arg, eval_set, search_set, vals, float(p), sense)


def sup_convolution(u, n, search_set: PointSet, eval_set: PointSet | None = None, p=1.0) -> ConvolutionResult:
    """``u^n(theta) = max_{theta'} u(theta') - n d(theta, theta')`` over the search set.

    ``u`` is a functional or its values on the search set. Ties go to the first
    maximizer in search-set order.
    """
    return _convolve(u, n, search_set, eval_set, p, 1)


def inf_convolution(v, n, search_set: PointSet, eval_set: PointSet | None = None, p=1.0) -> ConvolutionResult:
    """``v_n(theta) = min_{theta'} v(theta') + n d(theta, theta')`` over the search set."""
    return _convolve(v, n, search_set, eval_set, p, -1)


def lipschitz_excess(res: ConvolutionResult):
    """``max |u_n(a) - u_n(b)| - n d(a, b)`` over all evaluation pairs (``<= 0`` when n-Lipschitz)."""
    E = res.eval_set
    A, ta = E.features(), E.times
    worst = -math.inf
    for lo in range(0, len(E), _ROW_CHUNK):
        hi = min(lo + _ROW_CHUNK, len(E))
        D = kernels.distance_matrix(A[lo:hi], ta[lo:hi], A, ta, E.dt, res.p)
        diff = np.abs(res.values[lo:hi, None] - res.values[None, :])
        worst = max(worst, float(np.max(diff - res.n * D)))
    return worst


# ---------------------------------------------------------------------------
# terminal consistency


def _terminal_split(S: PointSet, p):
    term = S.terminal()
    inner = np.nonzero(S.t_idx < S.N)[0]
    if len(term) == 0:
        raise ValueError("search set has no terminal points")
    return term, inner


def terminal_lipschitz_constant(u, search_set: PointSet, p=1.0):
    """``max |u(theta') - u(T, w)| / d(theta', (T, w))`` over non-terminal ``theta'`` and terminal points."""
    S = search_set
    vals = S.evaluate(u) if isinstance(u, PathFunctional) else np.asarray(u, dtype=float)
    term, inner = _terminal_split(S, p)
    if len(inner) == 0:
        return 0.0
    F = S.features()
    D = kernels.distance_matrix(F[inner], S.times[inner], F[term], S.times[term], S.dt, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.abs(vals[inner][:, None] - vals[term][None, :]) / D
    return float(np.max(q[D > 0])) if np.any(D > 0) else 0.0


@dataclass
class TerminalReport:
    passed: bool
    n: float
    threshold: float
    delta: float
    sup_norm: float
    max_deviation: float

    def __bool__(self):
        return self.passed

    def to_dict(self):
        return dict(self.__dict__)


def terminal_consistency_check(u, C0, n, search_set: PointSet, p=1.0, tol=1e-12) -> TerminalReport:
    """Does ``u^n(T, .) = u(T, .)`` hold at every terminal point of the search set?

    ``delta`` is the smallest positive distance from a non-terminal search point to
    a terminal one; ``threshold = max(C0 + 1, 2 |u|_inf / delta)``.
    """
    S = search_set
    vals = S.evaluate(u) if isinstance(u, PathFunctional) else np.asarray(u, dtype=float)
    term, inner = _terminal_split(S, p)
    F = S.features()
    if len(inner):
        D = kernels.distance_matrix(F[inner], S.times[inner], F[term], S.times[term], S.dt, p)
        pos = D[D > 0]
        delta = float(pos.min()) if pos.size else math.inf
    else:
        delta = math.inf
    sup = float(np.max(np.abs(vals)))
    threshold = max(C0 + 1.0, 2.0 * sup / delta if delta > 0 else math.inf)
    res = sup_convolution(vals, n, S, S.subset(term), p)
    dev = float(np.max(np.abs(res.values - vals[term])))
    return TerminalReport(dev <= tol, float(n), threshold, delta, sup, dev)


# ---------------------------------------------------------------------------
# residual-shifted approximants


def shifted_approximant(u_n: PathFunctional, G: GFunction, C, n, T=None, sense=1, rho=None, rho_kw=None):
    """``u_n - rho((2C+1)/n) (T - t)`` (``sense=1``) or ``v_n + rho (T - t)`` (``sense=-1``).

    Returns the functional and the modulus value used.
    """
    rho_kw = rho_kw or {}
    x = (2.0 * C + 1.0) / n
    r = rho if rho is not None else rho_estimate(G, x, **rho_kw).value

    def batch(t_idx, paths, dt):
        horizon = (paths.shape[1] - 1) * dt if T is None else T
        return u_n.batch(t_idx, paths, dt) - sense * r * (horizon - t_idx * dt)

    return PathFunctional(batch, f"{u_n.name}~"), r


@dataclass
class ResidualReport:
    n: float
    rho: float
    worst: float
    bound: float
    n_members: int

    @property
    def passed(self):
        return self.worst <= self.bound

    def to_dict(self):
        return {"n": self.n, "rho": self.rho, "worst": self.worst, "bound": self.bound,
                "n_members": self.n_members, "pass": self.passed}


def residual_bound_check(u, G: GFunction, C, n, search_set: PointSet, sample_points, jet_grid=default_jet_grid,
                         delta_grid=(0.1,), grid=None, L=1.0, p=1.0, tol=None, rho_kw=None, role="sub"):
    """Worst residual of member jets of ``u^n`` (or ``v_n``) against ``rho((2C+1)/n) + tol``."""
    sense = 1 if role == "sub" else -1
    conv = _convolve(u, n, search_set, search_set.subset([0]), p, sense)
    un = conv.functional()
    dt = search_set.dt
    tol = 5 * dt if tol is None else tol
    rho = rho_estimate(G, (2.0 * C + 1.0) / n, p=p, **(rho_kw or {})).value
    check = check_subsolution if role == "sub" else check_supersolution
    rep = check(un, G, sample_points, jet_grid, delta_grid, grid, L, tol_residual=rho + tol)
    return ResidualReport(float(n), rho, rep.worst, rho + tol, rep.n_members)


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonReport:
    min_gap: float  # min(v - u) on the evaluation set
    terminal_ordered: bool
    tolerance: float
    traces: list = field(default_factory=list)  # per n: dict(n, rho, min_gap)

    @property
    def passed(self):
        return self.terminal_ordered and all(t["min_gap"] >= -self.tolerance for t in self.traces)

    def to_dict(self):
        return {"min_v_minus_u": self.min_gap, "terminal_ordered": self.terminal_ordered,
                "tolerance": self.tolerance, "pass": self.passed, "traces": self.traces}


def _restrict(f, on_search, S: PointSet, E: PointSet):
    if isinstance(f, PathFunctional):
        return E.evaluate(f)
    if E is S:
        return on_search
    pos = {k: i for i, k in enumerate(S.keys())}
    try:
        return on_search[[pos[k] for k in E.keys()]]
    except KeyError:
        raise ValueError("the search set must contain the evaluation set") from None


def comparison_pipeline(u, v, G: GFunction, eval_set: PointSet, search_set: PointSet | None = None,
                        n_ladder=(2, 5, 10, 20, 50), C=None, p=1.0, tol=None, rho_kw=None) -> ComparisonReport:
    """Regularize ``u`` from above and ``v`` from below and compare them along an n-ladder.

    A terminal ordering violation is recorded (``terminal_ordered=False``) and the
    pipeline still runs.
    """
    S = search_set or eval_set
    uS = S.evaluate(u) if isinstance(u, PathFunctional) else np.asarray(u, dtype=float)
    vS = S.evaluate(v) if isinstance(v, PathFunctional) else np.asarray(v, dtype=float)
    term = S.terminal()
    ordered = bool(np.all(uS[term] <= vS[term])) if len(term) else True
    C = float(max(np.max(np.abs(uS)), np.max(np.abs(vS)))) if C is None else float(C)
    tol = 5 * S.dt if tol is None else tol
    ue = _restrict(u, uS, S, eval_set)
    ve = _restrict(v, vS, S, eval_set)
    T = S.N * S.dt
    traces = []
    for n in n_ladder:
        x = (2.0 * C + 1.0) / n
        rho = rho_estimate(G, x, p=p, **(rho_kw or {})).value
        un = sup_convolution(uS, n, S, eval_set, p).values
        vn = inf_convolution(vS, n, S, eval_set, p).values
        shift = rho * (T - eval_set.times)
        gap = (vn + shift) - (un - shift)
        traces.append({"n": float(n), "rho": rho, "min_gap": float(np.min(gap)),
                       "max_u_lift": float(np.max(un - ue)), "max_v_drop": float(np.max(ve - vn))})
    return ComparisonReport(float(np.min(ve - ue)), ordered, tol, traces)

"""Lifting paths into the product space R^m x L^2(R_-, R^m).

A point ``(x0, x1)`` stores ``x1`` on the uniform grid ``s_j = s_left + j dt`` of
``[s_left, 0]`` and, to the left of the grid, an exponential tail
``x1(s) = edge * exp(s - s_left)`` (``edge = 0`` for lifted paths). The tail is
what the resolvent produces and it is integrated in closed form, so no
infinite-domain quadrature error enters the weak norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .pathspace import GridMismatchError, Path, SpaceTimePoint, row_norm

__all__ = [
    "HilbertPoint", "DomainAPoint", "lift", "semigroup_apply", "resolvent", "apply_A_minus_I", "b_norm",
    "h_norm", "d_B", "conv_functional", "conv_continuity_experiment", "ContinuityReport",
    "alternating_pair_family", "z_process", "roundtrip_error",
]

_SEAM_TOL = 1e-12


class HilbertPoint:
    """``x = (x0, x1)`` with ``x1`` sampled on ``[-(len-1) dt, 0]`` plus an exponential tail.

    Parameters
    ----------
    x0 : array_like, shape (m,)
    x1 : array_like, shape (K+1,) or (K+1, m)
        Values at ``s_j = -K dt + j dt``; the last entry is ``x1(0)``.
    dt : float
    edge : array_like, shape (m,), optional
        Tail value at the left end of the grid (default 0: ``x1`` vanishes beyond).
    """

    __slots__ = ("x0", "x1", "dt", "edge")

    def __init__(self, x0, x1, dt, edge=None):
        x0 = np.atleast_1d(np.array(x0, dtype=float))
        x1 = np.array(x1, dtype=float)
        if x1.ndim == 1:
            x1 = x1[:, None]
        if x1.ndim != 2 or x1.shape[1] != x0.size or x1.shape[0] < 2:
            raise ValueError("x1 must have shape (K+1, m) with K >= 1 and m = len(x0)")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.x0 = x0
        self.x1 = x1
        self.dt = float(dt)
        self.edge = np.zeros(x0.size) if edge is None else np.atleast_1d(np.array(edge, dtype=float))

    @property
    def m(self):
        return self.x0.size

    @property
    def K(self):
        return self.x1.shape[0] - 1

    @property
    def s_left(self):
        return -self.K * self.dt

    @property
    def grid(self):
        return self.s_left + np.arange(self.K + 1) * self.dt

    def extended(self, K):
        """The same point on a grid of ``K >= self.K`` steps (tail sampled onto the new nodes)."""
        if K < self.K:
            raise ValueError("can only extend the grid")
        extra = K - self.K
        if extra == 0:
            return self
        s = -np.arange(extra, 0, -1) * self.dt
        left = self.edge[None, :] * np.exp(s)[:, None]
        return HilbertPoint(self.x0, np.vstack([left, self.x1]), self.dt,
                            self.edge * math.exp(-extra * self.dt))

    def _align(self, other):
        if abs(self.dt - other.dt) > 1e-12 * self.dt or self.m != other.m:
            raise GridMismatchError("Hilbert points live on different grids")
        K = max(self.K, other.K)
        return self.extended(K), other.extended(K)

    def __add__(self, other):
        a, b = self._align(other)
        return HilbertPoint(a.x0 + b.x0, a.x1 + b.x1, a.dt, a.edge + b.edge)

    def __sub__(self, other):
        a, b = self._align(other)
        return HilbertPoint(a.x0 - b.x0, a.x1 - b.x1, a.dt, a.edge - b.edge)

    def __mul__(self, c):
        c = float(c)
        return HilbertPoint(c * self.x0, c * self.x1, self.dt, c * self.edge)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def allclose(self, other, atol=0.0):
        a, b = self._align(other)
        return (np.allclose(a.x0, b.x0, rtol=0, atol=atol) and np.allclose(a.x1, b.x1, rtol=0, atol=atol)
                and np.allclose(a.edge, b.edge, rtol=0, atol=atol))

    def __repr__(self):
        return f"HilbertPoint(m={self.m}, K={self.K}, dt={self.dt:g})"


class DomainAPoint(HilbertPoint):
    """A point of the generator's domain: ``x0 = x1(0)``."""

    def __init__(self, x0, x1, dt, edge=None):
        super().__init__(x0, x1, dt, edge)
        if np.max(np.abs(self.x0 - self.x1[-1])) > _SEAM_TOL * max(1.0, float(np.max(np.abs(self.x0)))):
            raise ValueError("domain points need x0 = x1(0)")


def lift(theta: SpaceTimePoint, T_ext=None) -> HilbertPoint:
    """``(w(t), s -> w(s + t) 1_[-t, 0](s))`` on the grid of ``[-T_ext, 0]`` (default ``T_ext = T``)."""
    dt = theta.dt
    K = theta.N if T_ext is None else int(round(T_ext / dt))
    if K < theta.t_index:
        raise ValueError("T_ext must be at least t")
    vals = theta.path.values
    x1 = np.zeros((K + 1, theta.path.m))
    k = theta.t_index
    x1[K - k:] = vals[: k + 1]
    return HilbertPoint(vals[k], x1, dt)


def _grid_steps(t, dt):
    k = int(round(t / dt))
    if k < 0 or abs(k * dt - t) > 1e-9 * max(dt, abs(t)):
        raise ValueError(f"t = {t} is not a non-negative multiple of the grid step {dt}")
    return k


def semigroup_apply(t, x: HilbertPoint) -> HilbertPoint:
    """``S_t x = (x0, x0 1_[-t, 0] + x1(. + t) 1_(-inf, -t))``; the grid grows by ``t`` on the left."""
    k = _grid_steps(t, x.dt)
    if k == 0:
        return HilbertPoint(x.x0, x.x1, x.dt, x.edge)
    x1 = np.vstack([x.x1[:-1], np.repeat(x.x0[None, :], k + 1, axis=0)])
    return HilbertPoint(x.x0, x1, x.dt, x.edge)


def _weak_profile(x: HilbertPoint):
    """``y(s) = e^s x0 + int_s^0 e^(s-r) x1(r) dr`` on the grid, and its tail constant at ``s_left``."""
    s = x.grid
    g = np.exp(-s)[:, None] * x.x1
    # J(s_j) = int_{s_j}^0 e^{-r} x1(r) dr
    cum = cumulative_trapezoid(g, dx=x.dt, axis=0, initial=0.0)
    J = cum[-1][None, :] - cum
    return np.exp(s)[:, None] * (x.x0[None, :] + J)


def resolvent(x: HilbertPoint) -> DomainAPoint:
    """``(A - I)^{-1} x = (-x0, -e^s x0 - int_s^0 e^(s - r) x1(r) dr)`` by trapezoid quadrature.

    Beyond the grid the output continues as an exponential; inputs must vanish there.
    """
    if np.any(x.edge != 0.0):
        raise ValueError("the resolvent is implemented for points whose x1 vanishes left of the grid")
    y = -_weak_profile(x)
    y[-1] = -x.x0  # exact at s = 0, where the integral is empty
    return DomainAPoint(-x.x0, y, x.dt, y[0])


def apply_A_minus_I(x: HilbertPoint) -> HilbertPoint:
    """``(0, x1') - (x0, x1)`` with central differences, a second-order one-sided rule at 0 and
    the exponential tail supplying the left neighbour of the first node."""
    if not isinstance(x, DomainAPoint):
        x = DomainAPoint(x.x0, x.x1, x.dt, x.edge)
    y, h = x.x1, x.dt
    left = (x.edge * math.exp(-h))[None, :]
    padded = np.vstack([left, y])
    d = np.empty_like(y)
    d[:-1] = (padded[2:] - padded[:-2]) / (2 * h)
    d[-1] = (3 * y[-1] - 4 * y[-2] + y[-3]) / (2 * h) if len(y) >= 3 else (y[-1] - y[-2]) / h
    return HilbertPoint(-x.x0, d - y, h, np.zeros(x.m))


def h_norm(x: HilbertPoint) -> float:
    """``(|x0|^2 + int |x1|^2)^(1/2)`` with trapezoid on the grid and the exact tail ``|edge|^2 / 2``."""
    sq = trapezoid(np.sum(x.x1 ** 2, axis=1), dx=x.dt)
    return math.sqrt(float(x.x0 @ x.x0) + sq + 0.5 * float(x.edge @ x.edge))


def b_norm(x: HilbertPoint) -> float:
    """The weak norm ``(|x0|^2 + int_{-inf}^0 |y(s)|^2 ds)^(1/2)`` with ``y`` as in the resolvent.

    On the grid the integrals are trapezoid sums; left of the grid
    ``y(s_left - v) = e^(-v) (A + c v)`` with ``A = y(s_left)`` and ``c`` the tail edge,
    whose square integrates to ``A.A/2 + A.c/2 + c.c/4``.
    """
    y = _weak_profile(x)
    body = trapezoid(np.sum(y ** 2, axis=1), dx=x.dt)
    A, c = y[0], x.edge
    tail = 0.5 * float(A @ A) + 0.5 * float(A @ c) + 0.25 * float(c @ c)
    return math.sqrt(float(x.x0 @ x.x0) + body + tail)


def roundtrip_error(x: HilbertPoint) -> float:
    """``h_norm(apply_A_minus_I(resolvent(x)) - x)``."""
    return h_norm(apply_A_minus_I(resolvent(x)) - x)


# ---------------------------------------------------------------------------
# weak pseudo-metric and convolution functionals


def _running_integral(values, dt):
    return cumulative_trapezoid(values, dx=dt, axis=0, initial=0.0)


def d_B(theta: SpaceTimePoint, theta_prime: SpaceTimePoint) -> float:
    """Weak pseudo-metric: time gap, current values, running integrals and windowed integrals.

    ``|t - t'| + |w_t - w'_t'| + |W(t) - W'(t')|
    + (int_0^T |(W(t) - W((t - r) v 0)) - (W'(t') - W'((t' - r) v 0))|^2 dr)^(1/2)``
    with ``W`` the trapezoid running integral of the stopped path.
    """
    if abs(theta.dt - theta_prime.dt) > 1e-12 * theta.dt or theta.path.m != theta_prime.path.m:
        raise GridMismatchError("d_B needs a shared grid")
    dt = theta.dt
    N = max(theta.N, theta_prime.N)
    t, tp = theta.t_index, theta_prime.t_index
    W = _running_integral(theta.frozen_values(), dt)
    Wp = _running_integral(theta_prime.frozen_values(), dt)
    k = np.arange(N + 1)
    win = (W[t] - W[np.maximum(t - k, 0)]) - (Wp[tp] - Wp[np.maximum(tp - k, 0)])
    fourth = math.sqrt(trapezoid(np.sum(win ** 2, axis=1), dx=dt))
    return (abs(t - tp) * dt + float(row_norm(theta.omega_t - theta_prime.omega_t))
            + float(row_norm(W[t] - Wp[tp])) + fourth)


def conv_functional(f, theta: SpaceTimePoint) -> float:
    """``int_0^t <f(r), w(t - r)> dr`` by the trapezoid rule on the grid.

    ``f`` is sampled on the grid of ``[0, T]`` (shape ``(N+1,)`` or ``(N+1, m)``) or a
    callable of the grid times.
    """
    dt = theta.dt
    k = theta.t_index
    r = np.arange(theta.N + 1) * dt
    fv = np.asarray(f(r) if callable(f) else f, dtype=float)
    if fv.ndim == 1:
        fv = fv[:, None]
    if fv.shape[0] != theta.N + 1 or fv.shape[1] not in (1, theta.path.m):
        raise GridMismatchError("f must be sampled on the path grid")
    if k == 0:
        return 0.0
    w = theta.path.values[k::-1]  # w(t - r_j), j = 0..k
    integrand = np.sum(fv[: k + 1] * w, axis=1)
    return float(trapezoid(integrand, dx=dt))


def alternating_pair_family(levels=4, N0=16, T=1.0, center=0.5, width=0.25, m=1):
    """Pairs ``((T, 0), (T, w_k))`` on grids ``N_k = N0 2^k``, ``w_k`` alternating in sign at every
    node under a tent envelope around ``center * T``.

    The weak distance of each pair shrinks like ``dt^2``, while the pairs stay a
    unit apart in the uniform norm.
    """
    out = []
    for k in range(levels):
        N = N0 * 2 ** k
        dt = T / N
        s = np.arange(N + 1) * dt
        env = np.clip(1.0 - np.abs(s - center * T) / (width * T), 0.0, None)
        w = ((-1.0) ** np.arange(N + 1)) * env
        vals = np.zeros((N + 1, m))
        vals[:, 0] = w
        vals[0] = 0.0
        out.append((SpaceTimePoint(N, Path.zeros(N, dt, m)), SpaceTimePoint(N, Path(vals, dt))))
    return out


@dataclass
class ContinuityReport:
    """Per-refinement ratios ``|F(a_k) - F(b_k)| / d_B(a_k, b_k)``."""

    dts: list
    distances: list
    ratios: list
    skipped: int = 0

    @property
    def growth(self):
        """Successive ratio quotients ``ratio_{k+1} / ratio_k``."""
        r = self.ratios
        return [r[i + 1] / r[i] if r[i] > 0 else math.inf for i in range(len(r) - 1)]

    @property
    def spread(self):
        """``max / min`` of the ratios (1 for a flat sequence)."""
        pos = [r for r in self.ratios if r > 0]
        return max(pos) / min(pos) if pos else 0.0

    def to_dict(self):
        return {"dt": self.dts, "d_B": self.distances, "ratio": self.ratios, "growth": self.growth,
                "spread": self.spread, "skipped": self.skipped}


def conv_continuity_experiment(f, pair_family) -> ContinuityReport:
    """Ratios of convolution-functional differences to weak distances along a pair family.

    ``f`` is a callable of time (sampled on each pair's grid). Pairs at weak
    distance zero are skipped.
    """
    dts, ds, rs, skipped = [], [], [], 0
    for a, b in pair_family:
        d = d_B(a, b)
        if d == 0.0:
            skipped += 1
            continue
        dts.append(a.dt)
        ds.append(d)
        rs.append(abs(conv_functional(f, a) - conv_functional(f, b)) / d)
    return ContinuityReport(dts, ds, rs, skipped)


# ---------------------------------------------------------------------------
# lifted state process


def z_process(t_index: int, x: HilbertPoint, A, M, N: int):
    """Lifted state along one scenario: ``Z_s = x`` for ``s <= t``, afterwards
    ``Z_{0,s} = x0 + A_{s-t} + M_{s-t}`` and ``Z_{1,s}`` the shifted history glued to it.

    ``A`` and ``M`` are scenario paths (shape ``(>= N - t_index + 1, m)``, starting at 0).
    Returns the list ``[Z_0, ..., Z_N]``.
    """
    A = np.asarray(A, dtype=float)
    M = np.asarray(M, dtype=float)
    if A.ndim == 1:
        A, M = A[:, None], M[:, None]
    need = N - t_index + 1
    if len(A) < need or len(M) < need:
        raise ValueError(f"scenario horizon {min(len(A), len(M)) - 1} shorter than {N - t_index}")
    out = [x] * (t_index + 1)
    traj = x.x0[None, :] + A[:need] + M[:need]  # Z_{0, t + j}, j = 0..need-1
    for j in range(1, need):
        x1 = np.vstack([x.x1[:-1], traj[: j + 1]])
        out.append(HilbertPoint(traj[j], x1, x.dt, x.edge))
    return out

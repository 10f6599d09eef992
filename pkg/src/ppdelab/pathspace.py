"""Discretized path space: paths, space-time points, shifts, jets and pseudo-metrics.

All paths in one experiment live on a shared uniform grid ``0, dt, ..., N dt``.
Array-level helpers take stacks of paths shaped ``(n, N+1, m)`` and are what
the tree solvers use; the object-level functions wrap them for single points.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridMismatchError", "Path", "SpaceTimePoint", "Jet", "PathFunctional",
    "freeze", "freeze_rows", "concat", "concat_values", "stopped", "shift_function",
    "h_delta", "h_delta_batch", "phi_monomial", "phi_batch",
    "d_infty", "backward_dp", "backward_features", "row_norm",
    "path_to_csv", "path_from_csv", "path_to_json", "path_from_json",
]

# relative slack used when comparing grid times against a threshold such as delta
_GRID_SLACK = 1e-12


class GridMismatchError(ValueError):
    """Raised when two paths do not share the time step or the dimension."""


class Path:
    """A continuous path sampled on the grid, starting at the origin.

    Parameters
    ----------
    values : array_like, shape (N+1,) or (N+1, m)
        Path values at grid times; ``values[0]`` must be exactly zero.
    dt : float
        Grid step.
    """

    __slots__ = ("values", "dt")

    def __init__(self, values, dt):
        v = np.array(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("path values must have shape (N+1,) or (N+1, m)")
        if not dt > 0:
            raise ValueError("dt must be positive")
        if np.any(v[0] != 0.0):
            raise ValueError("paths start at the origin: values[0] must be 0")
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        v.setflags(write=False)
        self.values = v
        self.dt = float(dt)

    @classmethod
    def zeros(cls, N, dt, m=1):
        return cls(np.zeros((N + 1, m)), dt)

    @classmethod
    def from_increments(cls, increments, dt):
        inc = np.asarray(increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        return cls(np.vstack([np.zeros((1, inc.shape[1])), np.cumsum(inc, axis=0)]), dt)

    @property
    def N(self):
        return self.values.shape[0] - 1

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def T(self):
        return self.N * self.dt

    def __len__(self):
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Path):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.dt, self.values.shape, self.values.tobytes()))

    def __repr__(self):
        return f"Path(N={self.N}, m={self.m}, dt={self.dt:g})"


@dataclass(frozen=True, eq=False)
class SpaceTimePoint:
    """A grid time index together with a path; only the prefix up to ``t_index`` matters."""

    t_index: int
    path: Path

    def __post_init__(self):
        t = int(self.t_index)
        if t < 0 or t > self.path.N:
            raise ValueError(f"t_index {t} outside [0, {self.path.N}]")
        object.__setattr__(self, "t_index", t)

    @property
    def t(self):
        return self.t_index * self.path.dt

    @property
    def omega_t(self):
        return self.path.values[self.t_index]

    @property
    def dt(self):
        return self.path.dt

    @property
    def N(self):
        return self.path.N

    def frozen_values(self):
        """Path values with everything after ``t_index`` frozen at ``omega_t``."""
        return freeze(self.path.values, self.t_index)

    def key(self):
        """Hashable identity of the stopped point."""
        return (self.t_index, self.path.dt, self.path.values[: self.t_index + 1].tobytes())

    def __eq__(self, other):
        if not isinstance(other, SpaceTimePoint):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


class Jet:
    """A test triple (alpha, beta, gamma) with gamma symmetric."""

    __slots__ = ("alpha", "beta", "gamma")

    def __init__(self, alpha, beta, gamma):
        b = np.atleast_1d(np.array(beta, dtype=float))
        g = np.array(gamma, dtype=float)
        if g.ndim == 0:
            g = g.reshape(1, 1)
        if b.ndim != 1 or g.shape != (b.size, b.size):
            raise ValueError("beta must be (m,) and gamma (m, m)")
        if not np.array_equal(g, g.T):
            raise ValueError("gamma must be symmetric")
        self.alpha = float(alpha)
        self.beta = b
        self.gamma = g

    @property
    def m(self):
        return self.beta.size

    def shifted(self, d_alpha=0.0, d_beta=0.0, d_gamma=0.0):
        return Jet(self.alpha + d_alpha, self.beta + d_beta, self.gamma + d_gamma)

    def as_tuple(self):
        return (self.alpha, self.beta.tolist(), self.gamma.tolist())

    def __repr__(self):
        if self.m == 1:
            return f"Jet({self.alpha:g}, {self.beta[0]:g}, {self.gamma[0, 0]:g})"
        return f"Jet({self.alpha:g}, {self.beta.tolist()}, {self.gamma.tolist()})"


# ---------------------------------------------------------------------------
# array helpers


def row_norm(x, axis=-1):
    """Euclidean norm along ``axis``, scaled by the largest entry so tiny values do not underflow."""
    x = np.asarray(x, dtype=float)
    scale = np.max(np.abs(x), axis=axis, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    q = x / safe
    return np.squeeze(scale, axis=axis) * np.sqrt(np.sum(q * q, axis=axis))


def freeze(values, k):
    """Copy of ``values`` (``(..., N+1, m)``) with indices after ``k`` set to the value at ``k``."""
    out = np.array(values, dtype=float, copy=True)
    out[..., k + 1:, :] = out[..., k:k + 1, :]
    return out


def freeze_rows(paths, idx):
    """Freeze each path of a stack ``(n, N+1, m)`` after its own index ``idx[i]``."""
    paths = np.asarray(paths, dtype=float)
    idx = np.asarray(idx, dtype=np.int64)
    held = paths[np.arange(paths.shape[0]), idx]
    after = np.arange(paths.shape[1])[None, :] > idx[:, None]
    return np.where(after[:, :, None], held[:, None, :], paths)


def concat_values(prefix, t_index, tail, N=None):
    """Array form of the concatenation on stacks of paths.

    ``prefix`` is ``(..., P, m)`` with ``P > t_index``; ``tail`` is ``(..., Q, m)``
    starting at zero. The result has ``N+1`` points (default ``P``): the prefix up to
    ``t_index`` followed by ``prefix[t_index] + tail[s - t_index]``. A tail that is too
    short is held at its last value, one that is too long is clipped at the horizon.
    """
    prefix = np.asarray(prefix, dtype=float)
    tail = np.asarray(tail, dtype=float)
    if N is None:
        N = prefix.shape[-2] - 1
    need = N - t_index + 1
    q = tail.shape[-2]
    if q >= need:
        tail = tail[..., :need, :]
    else:
        pad = np.repeat(tail[..., -1:, :], need - q, axis=-2)
        tail = np.concatenate([tail, pad], axis=-2)
    head = prefix[..., : t_index + 1, :]
    lead = np.broadcast_shapes(head.shape[:-2], tail.shape[:-2])
    head = np.broadcast_to(head, lead + head.shape[-2:])
    tail = np.broadcast_to(tail, lead + tail.shape[-2:])
    return np.concatenate([head, head[..., -1:, :] + tail[..., 1:, :]], axis=-2)


def _check_grid(a: Path, b: Path):
    if a.m != b.m or abs(a.dt - b.dt) > _GRID_SLACK * max(a.dt, b.dt):
        raise GridMismatchError(f"grid mismatch: dt {a.dt:g} vs {b.dt:g}, m {a.m} vs {b.m}")


# ---------------------------------------------------------------------------
# path operations


def concat(omega: Path, t_index: int, omega_prime: Path) -> Path:
    """Concatenate ``omega_prime`` onto ``omega`` at grid index ``t_index``.

    The result keeps the horizon of ``omega``; points of ``omega_prime`` beyond it
    are discarded and a short ``omega_prime`` is held at its last value.
    """
    _check_grid(omega, omega_prime)
    if not 0 <= t_index <= omega.N:
        raise ValueError(f"t_index {t_index} outside [0, {omega.N}]")
    return Path(concat_values(omega.values, t_index, omega_prime.values), omega.dt)


def stopped(theta: SpaceTimePoint, s_index: int) -> SpaceTimePoint:
    """The point stopped at ``s_index``: time ``min(t, s)`` and the path frozen from there."""
    k = min(theta.t_index, max(int(s_index), 0))
    return SpaceTimePoint(k, Path(freeze(theta.path.values, k), theta.dt))


class PathFunctional:
    """A function of space-time points with a vectorized evaluator.

    Parameters
    ----------
    batch : callable
        ``batch(t_idx, paths, dt) -> values`` where ``t_idx`` is an int array of shape
        ``(n,)`` and ``paths`` has shape ``(n, N+1, m)``. Paths passed in are frozen
        after their time index.
    name : str
    """

    def __init__(self, batch, name="u"):
        self._batch = batch
        self.name = name

    @classmethod
    def from_pointwise(cls, fn, name="u"):
        """Wrap ``fn(theta) -> float`` acting on single points."""

        def batch(t_idx, paths, dt):
            return np.array([fn(SpaceTimePoint(int(t), Path(p, dt))) for t, p in zip(t_idx, paths)],
                            dtype=float)

        return cls(batch, name)

    @classmethod
    def constant(cls, c, name=None):
        return cls(lambda t, paths, dt: np.full(len(t), float(c)), name or f"const({c:g})")

    def batch(self, t_idx, paths, dt):
        t_idx = np.asarray(t_idx, dtype=np.int64)
        paths = np.asarray(paths, dtype=float)
        if paths.ndim == 2:
            paths = paths[:, :, None]
        if t_idx.ndim == 0:
            t_idx = np.full(paths.shape[0], int(t_idx))
        out = np.asarray(self._batch(t_idx, paths, float(dt)), dtype=float)
        if out.shape != (paths.shape[0],):
            raise ValueError(f"functional {self.name} returned shape {out.shape}")
        return out

    def __call__(self, theta: SpaceTimePoint) -> float:
        vals = theta.frozen_values()[None]
        return float(self.batch(np.array([theta.t_index]), vals, theta.dt)[0])

    def _combine(self, other, op, sym):
        if isinstance(other, PathFunctional):
            f = other
            return PathFunctional(lambda t, p, dt: op(self.batch(t, p, dt), f.batch(t, p, dt)),
                                  f"({self.name}{sym}{f.name})")
        c = float(other)
        return PathFunctional(lambda t, p, dt: op(self.batch(t, p, dt), c), f"({self.name}{sym}{c:g})")

    def __add__(self, other):
        return self._combine(other, np.add, "+")

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, np.subtract, "-")

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        return self._combine(other, np.multiply, "*")

    __rmul__ = __mul__

    def __neg__(self):
        return PathFunctional(lambda t, p, dt: -self.batch(t, p, dt), f"-{self.name}")

    def __repr__(self):
        return f"PathFunctional({self.name})"


def shift_function(u: PathFunctional, theta: SpaceTimePoint) -> PathFunctional:
    """The shifted functional ``(t', w') -> u((t+t') ^ T, w concatenated at t with w')``.

    The result acts on points whose paths share the grid of ``theta``; their time
    index counts from the shift point.
    """
    t0 = theta.t_index
    base = theta.path.values
    N = theta.N

    def batch(t_idx, paths, dt):
        full = concat_values(base, t0, paths, N)
        tt = np.minimum(t0 + t_idx, N)
        return u.batch(tt, freeze_rows(full, tt), dt)

    return PathFunctional(batch, f"{u.name}^theta")


def h_delta_batch(delta, paths, dt):
    """First grid index where ``s dt + max_{r<=s} |path_r| >= delta``, else N, for a stack of paths."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    paths = np.asarray(paths, dtype=float)
    if paths.ndim == 2:
        paths = paths[None]
    N = paths.shape[-2] - 1
    run = np.maximum.accumulate(row_norm(paths), axis=-1)
    score = np.arange(N + 1) * dt + run
    hit = score >= delta - _GRID_SLACK * max(1.0, delta)
    first = np.where(hit.any(axis=-1), hit.argmax(axis=-1), N)
    return np.minimum(first, N).astype(np.int64)


def h_delta(delta: float, path: Path) -> int:
    """Grid hitting index of the localizing functional (grid ceiling of the continuum crossing)."""
    return int(h_delta_batch(delta, path.values[None], path.dt)[0])


def phi_batch(jet: Jet, t_idx, paths, dt):
    """Test monomial at a stack of points: ``alpha t + <beta, w_t> + 1/2 <gamma w_t, w_t>``."""
    t_idx = np.asarray(t_idx, dtype=np.int64)
    paths = np.asarray(paths, dtype=float)
    w = paths[np.arange(paths.shape[0]), t_idx]
    quad = np.einsum("ni,ij,nj->n", w, jet.gamma, w)
    return jet.alpha * t_idx * dt + w @ jet.beta + 0.5 * quad


def phi_monomial(jet: Jet, theta: SpaceTimePoint) -> float:
    if jet.m != theta.path.m:
        raise ValueError("jet and path dimensions differ")
    w = theta.omega_t
    return float(jet.alpha * theta.t + w @ jet.beta + 0.5 * w @ jet.gamma @ w)


# ---------------------------------------------------------------------------
# pseudo-metrics


def _aligned(theta: SpaceTimePoint, theta_prime: SpaceTimePoint):
    _check_grid(theta.path, theta_prime.path)
    N = max(theta.N, theta_prime.N)
    a = theta.frozen_values()
    b = theta_prime.frozen_values()
    if a.shape[0] < N + 1:
        a = np.vstack([a, np.repeat(a[-1:], N + 1 - a.shape[0], axis=0)])
    if b.shape[0] < N + 1:
        b = np.vstack([b, np.repeat(b[-1:], N + 1 - b.shape[0], axis=0)])
    return a, b, N


def d_infty(theta: SpaceTimePoint, theta_prime: SpaceTimePoint) -> float:
    """Uniform pseudo-metric: time gap plus sup distance of the stopped paths."""
    a, b, _ = _aligned(theta, theta_prime)
    gap = abs(theta.t_index - theta_prime.t_index) * theta.dt
    return float(gap + np.max(row_norm(a - b)))


def backward_features(t_idx, paths, K=None):
    """Paths read backward from their time index, zero before time 0.

    Returns an array ``R`` of shape ``(n, K, m)`` with ``R[i, k] = paths[i, t_i - k]``
    (zero when ``t_i - k < 0``); ``K`` defaults to N, the number of left-endpoint
    nodes ``s_k = k dt`` of ``[0, T)``.
    """
    paths = np.asarray(paths, dtype=float)
    t_idx = np.asarray(t_idx, dtype=np.int64)
    n, P, m = paths.shape
    if K is None:
        K = P - 1
    src = t_idx[:, None] - np.arange(K)[None, :]
    valid = src >= 0
    out = paths[np.arange(n)[:, None], np.clip(src, 0, P - 1)]
    out[~valid] = 0.0
    return out


def backward_dp(p: float, theta: SpaceTimePoint, theta_prime: SpaceTimePoint) -> float:
    """Backward p-pseudo-metric with the left-endpoint rule on ``[0, T)``."""
    if not p >= 1:
        raise ValueError("p must be >= 1")
    a, b, N = _aligned(theta, theta_prime)
    t = np.array([theta.t_index, theta_prime.t_index])
    R = backward_features(t, np.stack([a, b]), N)
    diff = row_norm(R[0] - R[1])
    gap = abs(theta.t_index - theta_prime.t_index) * theta.dt
    integral = (theta.dt * np.sum(diff ** p)) ** (1.0 / p)
    return float(gap + diff[0] + integral)


# ---------------------------------------------------------------------------
# serialization


def path_to_json(path: Path) -> str:
    return json.dumps({"header": {"N": path.N, "dt": path.dt, "m": path.m},
                       "values": path.values.tolist()})


def path_from_json(text: str) -> Path:
    obj = json.loads(text)
    head = obj["header"]
    p = Path(obj["values"], head["dt"])
    if p.N != head["N"] or p.m != head["m"]:
        raise ValueError("header does not match the values")
    return p


def path_to_csv(path: Path) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps({"N": path.N, "dt": path.dt, "m": path.m}) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"w{i + 1}" for i in range(path.m)])
    for k, row in enumerate(path.values):
        w.writerow([repr(k * path.dt)] + [repr(float(x)) for x in row])
    return buf.getvalue()


def path_from_csv(text: str) -> Path:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("missing grid header line")
    head = json.loads(lines[0][1:])
    rows = list(csv.reader(lines[2:]))
    vals = np.array([[float(x) for x in r[1:]] for r in rows if r])
    p = Path(vals, head["dt"])
    if p.N != head["N"] or p.m != head["m"]:
        raise ValueError("header does not match the values")
    return p

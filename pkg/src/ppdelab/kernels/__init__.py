"""Hot loops with a compiled backend and a numpy fallback chosen at import.

Set ``PPDE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("PPDE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("fallback forced by PPDE_PURE_PYTHON")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

__all__ = ["BACKEND", "reduce_level", "distance_matrix", "envelope", "backend"]


def backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'python' or None for the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def reduce_level(child, ctrl_idx, ctrl_prob, ctrl_cnt, stop, forced, allow_stop=True, sense=1):
    """One backward-induction step over a level of the scenario tree.

    Parameters
    ----------
    child : (R, I) array
        Values of the I children of each of R nodes.
    ctrl_idx, ctrl_prob : (K, J) arrays
        For each control, the child columns it charges and their probabilities.
    ctrl_cnt : (K,) array
        Number of valid branches per control.
    stop : (R,) array
        Value of stopping at each node.
    forced : (R,) bool array
        Nodes that must stop.
    allow_stop : bool
        Whether stopping competes with continuation at unforced nodes.
    sense : {1, -1}
        1 for the supremum, -1 for the infimum.

    Returns
    -------
    values : (R,) array
    choice : (R,) int array
        -1 for stop, otherwise the index of the optimal control. Ties prefer
        stopping, then the lowest control index.
    """
    return _impl.reduce_level(
        np.ascontiguousarray(child, dtype=np.float64),
        np.ascontiguousarray(ctrl_idx, dtype=np.int64),
        np.ascontiguousarray(ctrl_prob, dtype=np.float64),
        np.ascontiguousarray(ctrl_cnt, dtype=np.int64),
        np.ascontiguousarray(stop, dtype=np.float64),
        np.ascontiguousarray(forced, dtype=np.uint8),
        bool(allow_stop),
        int(sense),
    )


def _prep(feats, times):
    return (np.ascontiguousarray(feats, dtype=np.float64),
            np.ascontiguousarray(times, dtype=np.float64))


def distance_matrix(A, ta, B, tb, dt, p):
    """Pairwise backward p-distances between two feature sets (see ``pathspace.backward_features``)."""
    A, ta = _prep(A, ta)
    B, tb = _prep(B, tb)
    return _impl.distance_matrix(A, ta, B, tb, float(dt), float(p))


def envelope(A, ta, B, tb, values, n, dt, p, sense=1):
    """Sup (sense=1) or inf (sense=-1) convolution of ``values`` on B evaluated at the points A.

    Returns the envelope values and the index of the first optimizing point of B.
    """
    A, ta = _prep(A, ta)
    B, tb = _prep(B, tb)
    return _impl.envelope(A, ta, B, tb, np.ascontiguousarray(values, dtype=np.float64),
                          float(n), float(dt), float(p), int(sense))

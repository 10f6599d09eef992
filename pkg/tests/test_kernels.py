import os
import subprocess
import sys

import numpy as np
import pytest

from ppdelab import kernels
from ppdelab.lattice import ControlGrid
from ppdelab.pathspace import backward_features

try:
    CY = kernels.backend("cython")
except ImportError:  # fallback-only install
    CY = None
PY = kernels.backend("python")
needs_cython = pytest.mark.skipif(CY is None, reason="compiled backend not built")


def _reduce_case(seed, R=500, sense=1, allow_stop=True):
    rng = np.random.default_rng(seed)
    tab = ControlGrid.symmetric(1.0, 0.125, 3, 2).increment_table()
    child = rng.standard_normal((R, len(tab.increments)))
    child[:, 1] = child[:, 0]  # force ties between controls
    stop = rng.standard_normal(R)
    forced = (rng.random(R) < 0.1).astype(np.uint8)
    return (child, tab.ctrl_idx.astype(np.int64), tab.ctrl_prob, tab.ctrl_cnt.astype(np.int64), stop, forced,
            allow_stop, sense)


def _features(rng, n, N=6):
    dt = 1.0 / N
    t = rng.integers(0, N + 1, size=n)
    paths = np.cumsum(rng.choice([-1.0, 0.0, 1.0], size=(n, N + 1, 1)) * np.sqrt(dt), axis=1)
    paths[:, 0] = 0.0
    return np.ascontiguousarray(backward_features(t, paths)), (t * dt).astype(float), dt


def test_backend_selection():
    assert kernels.BACKEND in ("cython", "python")
    with pytest.raises(ValueError):
        kernels.backend("fortran")


def test_env_forces_fallback():
    code = "import ppdelab.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, PPDE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_cython
@pytest.mark.parametrize("seed,sense,allow", [(0, 1, True), (1, -1, True), (2, 1, False), (3, -1, False)])
def test_reduce_level_bitwise(seed, sense, allow):
    case = _reduce_case(seed, sense=sense, allow_stop=allow)
    a, b = PY.reduce_level(*case), CY.reduce_level(*case)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_reduce_level_prefers_stop_on_ties():
    child = np.zeros((1, 9))
    tab = ControlGrid.symmetric(1.0, 0.125, 3, 2).increment_table()
    v, c = kernels.reduce_level(child, tab.ctrl_idx.astype(np.int64), tab.ctrl_prob, tab.ctrl_cnt.astype(np.int64),
                                np.zeros(1), np.zeros(1, dtype=np.uint8), True, 1)
    assert v[0] == 0.0 and c[0] == -1


@needs_cython
@pytest.mark.parametrize("p", [1.0, 2.0])
def test_distance_and_envelope_bitwise(p):
    rng = np.random.default_rng(5)
    A, ta, dt = _features(rng, 40)
    B, tb, _ = _features(rng, 120)
    assert np.array_equal(PY.distance_matrix(A, ta, B, tb, dt, p), CY.distance_matrix(A, ta, B, tb, dt, p))
    vals = rng.standard_normal(len(B))
    for sense in (1, -1):
        a = PY.envelope(A, ta, B, tb, vals, 3.0, dt, p, sense)
        b = CY.envelope(A, ta, B, tb, vals, 3.0, dt, p, sense)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_distance_matrix_zero_diagonal():
    rng = np.random.default_rng(9)
    A, ta, dt = _features(rng, 30)
    D = kernels.distance_matrix(A, ta, A, ta, dt, 1.0)
    assert np.all(np.diag(D) == 0.0) and np.allclose(D, D.T, atol=1e-14, rtol=0)


@pytest.mark.parametrize("name", ["python", "cython"])
def test_distance_does_not_underflow(name):
    if name == "cython" and CY is None:
        pytest.skip("compiled backend not built")
    k = kernels.backend(name)
    A = np.zeros((1, 4, 2))
    B = np.zeros((1, 4, 2))
    B[0, 0] = [3e-200, 4e-200]
    D = k.distance_matrix(A, np.zeros(1), B, np.zeros(1), 0.25, 1.0)
    assert D[0, 0] == pytest.approx(5e-200 * 1.25, rel=1e-15)

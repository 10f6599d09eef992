# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: one backward-induction level and backward-metric envelopes.

The arithmetic order matches ``_pykernels`` term by term so both backends
return bitwise identical DP values.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, pow, fabs

cnp.import_array()


def reduce_level(const double[:, ::1] child,
                 const cnp.int64_t[:, ::1] ctrl_idx,
                 const double[:, ::1] ctrl_prob,
                 const cnp.int64_t[::1] ctrl_cnt,
                 const double[::1] stop,
                 const cnp.uint8_t[::1] forced,
                 bint allow_stop,
                 int sense):
    cdef Py_ssize_t R = child.shape[0]
    cdef Py_ssize_t K = ctrl_idx.shape[0]
    cdef Py_ssize_t r, k, j
    cdef double acc, best, s = <double>sense
    cdef cnp.int64_t bk
    out = np.empty(R, dtype=np.float64)
    choice = np.empty(R, dtype=np.int64)
    cdef double[::1] o = out
    cdef cnp.int64_t[::1] c = choice
    for r in range(R):
        if forced[r]:
            o[r] = stop[r]
            c[r] = -1
            continue
        best = 0.0
        bk = -1
        for k in range(K):
            acc = 0.0
            for j in range(ctrl_cnt[k]):
                acc = acc + ctrl_prob[k, j] * child[r, ctrl_idx[k, j]]
            if bk < 0 or s * acc > s * best:
                best = acc
                bk = k
        if allow_stop and s * stop[r] >= s * best:
            o[r] = stop[r]
            c[r] = -1
        else:
            o[r] = best
            c[r] = bk
    return out, choice


cdef inline double _pair(const double[:, :, ::1] A, Py_ssize_t i,
                         const double[:, :, ::1] B, Py_ssize_t j,
                         double dt, double p) nogil:
    cdef Py_ssize_t K = A.shape[1], M = A.shape[2], k, d
    cdef double acc = 0.0, sq, diff, head = 0.0, nrm, scale, q
    for k in range(K):
        # scaled by the largest entry so tiny differences do not underflow
        scale = 0.0
        for d in range(M):
            diff = fabs(A[i, k, d] - B[j, k, d])
            if diff > scale:
                scale = diff
        sq = 0.0
        if scale > 0.0:
            for d in range(M):
                q = (A[i, k, d] - B[j, k, d]) / scale
                sq = sq + q * q
        nrm = scale * sqrt(sq)
        if k == 0:
            head = nrm
        if p == 1.0:
            acc = acc + nrm
        elif p == 2.0:
            acc = acc + nrm * nrm
        else:
            acc = acc + pow(nrm, p)
    acc = dt * acc
    if p == 1.0:
        return head + acc
    elif p == 2.0:
        return head + sqrt(acc)
    return head + pow(acc, 1.0 / p)


def distance_matrix(const double[:, :, ::1] A, const double[::1] ta,
                    const double[:, :, ::1] B, const double[::1] tb,
                    double dt, double p):
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], i, j
    out = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(na):
            for j in range(nb):
                o[i, j] = fabs(ta[i] - tb[j]) + _pair(A, i, B, j, dt, p)
    return out


def envelope(const double[:, :, ::1] A, const double[::1] ta,
             const double[:, :, ::1] B, const double[::1] tb,
             const double[::1] values, double n, double dt, double p, int sense):
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], i, j, bj
    cdef double s = <double>sense, cand, best, d
    out = np.empty(na, dtype=np.float64)
    arg = np.empty(na, dtype=np.int64)
    cdef double[::1] o = out
    cdef cnp.int64_t[::1] g = arg
    with nogil:
        for i in range(na):
            best = 0.0
            bj = -1
            for j in range(nb):
                d = fabs(ta[i] - tb[j]) + _pair(A, i, B, j, dt, p)
                cand = values[j] - s * n * d
                if bj < 0 or s * cand > s * best:
                    best = cand
                    bj = j
            o[i] = best
            g[i] = bj
    return out, arg

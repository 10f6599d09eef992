"""Pure numpy versions of the compiled kernels.

Reductions are written as explicit sequential sums so that the results agree
bitwise with the compiled backend.
"""
import numpy as np


def reduce_level(child, ctrl_idx, ctrl_prob, ctrl_cnt, stop, forced, allow_stop, sense):
    s = float(sense)
    R = child.shape[0]
    best = np.zeros(R)
    bk = np.full(R, -1, dtype=np.int64)
    for k in range(ctrl_idx.shape[0]):
        acc = np.zeros(R)
        for j in range(ctrl_cnt[k]):
            acc = acc + ctrl_prob[k, j] * child[:, ctrl_idx[k, j]]
        better = (bk < 0) | (s * acc > s * best)
        best = np.where(better, acc, best)
        bk = np.where(better, k, bk)
    take_stop = forced.astype(bool)
    if allow_stop:
        take_stop = take_stop | (s * stop >= s * best)
    out = np.where(take_stop, stop, best)
    choice = np.where(take_stop, -1, bk).astype(np.int64)
    return out, choice


def _scaled_norm(diff):
    # Euclidean norm over the last axis, scaled by the largest entry so tiny differences do not underflow
    scale = np.max(np.abs(diff), axis=-1)
    safe = np.where(scale > 0, scale, 1.0)
    q = diff / safe[..., None]
    return scale * np.sqrt(np.sum(q * q, axis=-1))


def _pair_rows(A_i, B, dt, p):
    # A_i: (K, m) features of one point; B: (nb, K, m)
    diff = B - A_i[None]
    nrm = _scaled_norm(diff)
    acc = np.zeros(B.shape[0])
    for k in range(B.shape[1]):
        if p == 1.0:
            acc = acc + nrm[:, k]
        elif p == 2.0:
            acc = acc + nrm[:, k] * nrm[:, k]
        else:
            acc = acc + nrm[:, k] ** p
    acc = dt * acc
    if p == 1.0:
        return nrm[:, 0] + acc
    if p == 2.0:
        return nrm[:, 0] + np.sqrt(acc)
    return nrm[:, 0] + acc ** (1.0 / p)


def distance_matrix(A, ta, B, tb, dt, p):
    out = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        out[i] = np.abs(ta[i] - tb) + _pair_rows(A[i], B, dt, p)
    return out


def envelope(A, ta, B, tb, values, n, dt, p, sense):
    s = float(sense)
    out = np.empty(A.shape[0])
    arg = np.empty(A.shape[0], dtype=np.int64)
    for i in range(A.shape[0]):
        d = np.abs(ta[i] - tb) + _pair_rows(A[i], B, dt, p)
        cand = values - s * n * d
        j = int(np.argmax(s * cand))
        out[i] = cand[j]
        arg[i] = j
    return out, arg

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: neighbor search, farthest point sampling,
scatter-add, and the fused channel-attention response pool.

Row-parallel loops use OpenMP; every thread writes disjoint output rows,
so results are bitwise independent of the thread count. Semantics (tie
rules, accumulation order for scatter) match tcenet.kernels.pyref.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport INFINITY, exp, expf
from libc.stdlib cimport free, malloc

cnp.import_array()

ctypedef fused real:
    float
    double


def knn(double[:, ::1] feats, Py_ssize_t k):
    """k nearest rows by squared Euclidean distance, self excluded.

    Rows sorted by ascending distance, ties by ascending index.
    """
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t c = feats.shape[1]
    idx_arr = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] idx = idx_arr
    cdef Py_ssize_t i, j, t, q, pos
    cdef double d, diff
    cdef double* bd
    cdef long long* bj

    for i in prange(n, nogil=True, schedule="static"):
        bd = <double*> malloc(k * sizeof(double))
        bj = <long long*> malloc(k * sizeof(long long))
        for q in range(k):
            bd[q] = INFINITY
            bj[q] = -1
        for j in range(n):
            if j == i:
                continue
            d = 0.0
            for t in range(c):
                diff = feats[i, t] - feats[j, t]
                d = d + diff * diff
            if d >= bd[k - 1]:
                continue  # equal distance keeps the earlier (smaller) index
            pos = k - 1
            while pos > 0 and d < bd[pos - 1]:
                bd[pos] = bd[pos - 1]
                bj[pos] = bj[pos - 1]
                pos = pos - 1
            bd[pos] = d
            bj[pos] = j
        for q in range(k):
            idx[i, q] = bj[q]
        free(bd)
        free(bj)
    return idx_arr


def fps(double[:, ::1] coords, Py_ssize_t m, Py_ssize_t start):
    """Greedy max-min sampling; ties broken by lowest index."""
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t c = coords.shape[1]
    sel_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] sel = sel_arr
    mind_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t step, j, t, best
    cdef double d, diff, bestd
    cdef Py_ssize_t cur = start

    sel[0] = start
    for j in range(n):
        d = 0.0
        for t in range(c):
            diff = coords[j, t] - coords[cur, t]
            d += diff * diff
        mind[j] = d
    for step in range(1, m):
        best = 0
        bestd = mind[0]
        for j in range(1, n):
            if mind[j] > bestd:
                bestd = mind[j]
                best = j
        sel[step] = best
        cur = best
        for j in range(n):
            d = 0.0
            for t in range(c):
                diff = coords[j, t] - coords[cur, t]
                d += diff * diff
            if d < mind[j]:
                mind[j] = d
    return sel_arr


def scatter_add_rows(real[:, ::1] out, long long[::1] idx, real[:, ::1] rows):
    """out[idx[i]] += rows[i], accumulated in ascending i order."""
    cdef Py_ssize_t m = idx.shape[0]
    cdef Py_ssize_t c = rows.shape[1]
    cdef Py_ssize_t i, t
    cdef long long r
    with nogil:
        for i in range(m):
            r = idx[i]
            for t in range(c):
                out[r, t] += rows[i, t]


def attention_pool_forward(real[:, ::1] q, real[:, ::1] k, real[:, :, ::1] v):
    """Fused per-row channel grid, column softmax and response max-pool.

    Returns (out, attn, argmax): out[r, c] = max_p attn[r, p, c] * v[r, p, c]
    where attn[:, :, c] is softmax over p of q[r, p] * k[r, c].
    """
    cdef Py_ssize_t rr = q.shape[0]
    cdef Py_ssize_t pp = q.shape[1]
    cdef Py_ssize_t cc = k.shape[1]
    if real is float:
        out_arr = np.empty((rr, cc), dtype=np.float32)
        attn_arr = np.empty((rr, pp, cc), dtype=np.float32)
    else:
        out_arr = np.empty((rr, cc), dtype=np.float64)
        attn_arr = np.empty((rr, pp, cc), dtype=np.float64)
    arg_arr = np.empty((rr, cc), dtype=np.int8)
    cdef real[:, ::1] out = out_arr
    cdef real[:, :, ::1] attn = attn_arr
    cdef signed char[:, ::1] arg = arg_arr
    cdef Py_ssize_t r, p, c2
    cdef real qp, e, t
    cdef real* mbuf
    cdef real* sbuf

    for r in prange(rr, nogil=True, schedule="static"):
        mbuf = <real*> malloc(cc * sizeof(real))
        sbuf = <real*> malloc(cc * sizeof(real))
        for p in range(pp):
            qp = q[r, p]
            for c2 in range(cc):
                attn[r, p, c2] = qp * k[r, c2]
        for c2 in range(cc):
            mbuf[c2] = attn[r, 0, c2]
            sbuf[c2] = 0.0
        for p in range(1, pp):
            for c2 in range(cc):
                if attn[r, p, c2] > mbuf[c2]:
                    mbuf[c2] = attn[r, p, c2]
        for p in range(pp):
            for c2 in range(cc):
                if real is float:
                    e = expf(attn[r, p, c2] - mbuf[c2])
                else:
                    e = exp(attn[r, p, c2] - mbuf[c2])
                attn[r, p, c2] = e
                sbuf[c2] = sbuf[c2] + e
        for c2 in range(cc):
            sbuf[c2] = 1.0 / sbuf[c2]
        for c2 in range(cc):
            attn[r, 0, c2] = attn[r, 0, c2] * sbuf[c2]
            out[r, c2] = attn[r, 0, c2] * v[r, 0, c2]
            arg[r, c2] = 0
        for p in range(1, pp):
            for c2 in range(cc):
                attn[r, p, c2] = attn[r, p, c2] * sbuf[c2]
                t = attn[r, p, c2] * v[r, p, c2]
                if t > out[r, c2]:
                    out[r, c2] = t
                    arg[r, c2] = <signed char> p
        free(mbuf)
        free(sbuf)
    return out_arr, attn_arr, arg_arr


def attention_pool_backward(real[:, ::1] gout, real[:, :, ::1] attn,
                            signed char[:, ::1] arg, real[:, ::1] q,
                            real[:, ::1] k, real[:, :, ::1] v):
    """Gradients of attention_pool_forward w.r.t. q, k, v."""
    cdef Py_ssize_t rr = q.shape[0]
    cdef Py_ssize_t pp = q.shape[1]
    cdef Py_ssize_t cc = k.shape[1]
    if real is float:
        dq_arr = np.zeros((rr, pp), dtype=np.float32)
        dk_arr = np.zeros((rr, cc), dtype=np.float32)
        dv_arr = np.zeros((rr, pp, cc), dtype=np.float32)
    else:
        dq_arr = np.zeros((rr, pp), dtype=np.float64)
        dk_arr = np.zeros((rr, cc), dtype=np.float64)
        dv_arr = np.zeros((rr, pp, cc), dtype=np.float64)
    cdef real[:, ::1] dq = dq_arr
    cdef real[:, ::1] dk = dk_arr
    cdef real[:, :, ::1] dv = dv_arr
    cdef Py_ssize_t r, p, c2, ps
    cdef real g, astar, dstar, s, da

    for r in prange(rr, nogil=True, schedule="static"):
        for c2 in range(cc):
            ps = arg[r, c2]
            g = gout[r, c2]
            astar = attn[r, ps, c2]
            dv[r, ps, c2] = g * astar
            dstar = g * v[r, ps, c2]      # grad w.r.t. attn at the argmax row
            s = dstar * astar             # sum_p dattn * attn (only argmax nonzero)
            for p in range(pp):
                if p == ps:
                    da = astar * (dstar - s)
                else:
                    da = attn[r, p, c2] * (-s)
                dq[r, p] += da * k[r, c2]
                dk[r, c2] += da * q[r, p]
    return dq_arr, dk_arr, dv_arr

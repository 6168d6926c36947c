"""Pure-numpy reference implementations of the hot kernels.

These are the fallback when the compiled extension is unavailable and
the ground truth the extension is benchmarked against. Semantics
(ordering, tie rules) are identical in both backends; floating-point
results may differ in the last bits because summation order differs.
"""

from __future__ import annotations

import numpy as np

_CHUNK = 128  # rows per distance block, keeps the N x N work in cache-ish sizes


def knn(feats: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest rows (squared Euclidean), self excluded.

    Rows come back sorted by ascending distance, ties by ascending index.
    """
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    n = feats.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        diff = feats[lo:hi, None, :] - feats[None, :, :]
        d2 = np.einsum("ijc,ijc->ij", diff, diff)
        d2[np.arange(lo, hi) - lo, np.arange(lo, hi)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")  # stable => ties by index
        out[lo:hi] = order[:, :k]
    return out


def fps(coords: np.ndarray, m: int, start: int) -> np.ndarray:
    """Greedy farthest point sampling; ties broken by lowest index."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    n = coords.shape[0]
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    diff = coords - coords[start]
    mind = np.einsum("ij,ij->i", diff, diff)
    for step in range(1, m):
        nxt = int(np.argmax(mind))  # first occurrence on ties
        selected[step] = nxt
        diff = coords - coords[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", diff, diff), out=mind)
    return selected


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """out[idx[i]] += rows[i], accumulated in ascending i order."""
    np.add.at(out, idx, rows)


def attention_pool_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Fused channel-attention response pool.

    Per row: grid a[p, c] = q[p] * k[c]; attn = softmax over p for each
    column c; out[c] = max over p of attn[p, c] * v[p, c]. Returns
    (out, attn, argmax) with argmax as int8 (p < 128).
    """
    a = q[:, :, None] * k[:, None, :]
    a -= a.max(axis=1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=1, keepdims=True)
    b = a * v
    arg = b.argmax(axis=1).astype(np.int8)
    out = np.take_along_axis(b, arg[:, None, :].astype(np.int64), axis=1)[:, 0, :]
    return np.ascontiguousarray(out), a, arg


def attention_pool_backward(gout, attn, arg, q, k, v):
    """Gradients of attention_pool_forward w.r.t. q, k, v."""
    arg64 = arg[:, None, :].astype(np.int64)
    astar = np.take_along_axis(attn, arg64, axis=1)[:, 0, :]
    vstar = np.take_along_axis(v, arg64, axis=1)[:, 0, :]
    dv = np.zeros_like(v)
    np.put_along_axis(dv, arg64, (gout * astar)[:, None, :], axis=1)
    dattn_star = gout * vstar                    # grad w.r.t. attn at the argmax row
    s = dattn_star * astar                       # sum_p dattn * attn (only argmax nonzero)
    da = attn * (-s[:, None, :])
    bump = np.take_along_axis(da, arg64, axis=1) + (astar * dattn_star)[:, None, :]
    np.put_along_axis(da, arg64, bump, axis=1)
    dq = np.einsum("rpc,rc->rp", da, k)
    dk = np.einsum("rpc,rp->rc", da, q)
    return dq, dk, dv

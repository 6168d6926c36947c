"""Feature-space neighbor graphs, farthest point sampling and interpolation.

Neighborhoods are selected by feature similarity (squared Euclidean
distance in the current feature space), not by fixed spatial position;
callers rebuild them from each layer's input features so the graph
stays dynamic. Distances are computed in fp64 in both kernel backends,
so index results are stable against the brute-force oracles used in
tests. Tie rules everywhere: ascending distance, then ascending index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tcenet import kernels
from tcenet import tensor as T


class ParameterError(ValueError):
    """A sampling/neighbor request is impossible for the given cloud size."""


@dataclass
class NeighborIndex:
    """N x k neighbor rows, sorted by ascending distance then index."""

    indices: np.ndarray
    k: int
    source_space: str = "feature"  # "coordinate" for first-layer graphs


@dataclass
class SampleSet:
    """Farthest-point sample, in selection order (first = start index)."""

    selected: np.ndarray


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def knn_by_feature(features, k: int, source_space: str = "feature") -> NeighborIndex:
    """k nearest points to each point in feature space, self excluded."""
    feats = _as_array(features)
    n = feats.shape[0]
    if k >= n:
        raise ParameterError(f"knn_by_feature: k={k} must be < N={n}")
    if k < 1:
        raise ParameterError(f"knn_by_feature: k={k} must be >= 1")
    if not np.isfinite(feats).all():
        raise T.NumericError("knn_by_feature: non-finite features")
    f64 = np.ascontiguousarray(feats, dtype=np.float64)
    return NeighborIndex(indices=kernels.knn(f64, k), k=k, source_space=source_space)


def fps(coords, m: int, start: int = 0) -> SampleSet:
    """Greedy max-min subsample of m points, beginning at ``start``."""
    pts = _as_array(coords)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ParameterError(f"fps: m={m} out of range for N={n}")
    if not 0 <= start < n:
        raise ParameterError(f"fps: start={start} out of range for N={n}")
    c64 = np.ascontiguousarray(pts, dtype=np.float64)
    return SampleSet(selected=kernels.fps(c64, m, start))


def gather_neighbors(values: T.Tensor, idx: NeighborIndex) -> T.Tensor:
    """out[i][n] = values[idx[i][n]]; differentiable via scatter-add."""
    return T.gather_rows(values, idx.indices)


def interpolate_3nn(coarse_coords, coarse_feats: T.Tensor, fine_coords) -> T.Tensor:
    """Inverse-squared-distance blend of each fine point's 3 nearest coarse points.

    Weights are 1 / (d^2 + 1e-8), normalized per fine point; with fewer
    than 3 coarse points all of them are used. Differentiable in the
    coarse features (the weights are constants of the geometry).
    """
    cc = np.asarray(_as_array(coarse_coords), dtype=np.float64)
    fc = np.asarray(_as_array(fine_coords), dtype=np.float64)
    m = cc.shape[0]
    if m < 1:
        raise ParameterError("interpolate_3nn: need at least one coarse point")
    nn = min(3, m)
    idx, w = interpolation_weights(cc, fc, nn)
    gathered = T.gather_rows(coarse_feats, idx)            # (N, nn, C)
    wt = T.Tensor(w[:, :, None].astype(coarse_feats.dtype))
    return T.sum_reduce_axis(T.mul(gathered, wt), 1)


def interpolation_weights(coarse_coords: np.ndarray, fine_coords: np.ndarray, nn: int):
    """(indices (N, nn), weights (N, nn)): nn nearest coarse points per fine
    point, inverse-squared-distance weights normalized to sum 1."""
    d2 = ((fine_coords[:, None, :] - coarse_coords[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :nn]
    near = np.take_along_axis(d2, order, axis=1)
    w = 1.0 / (near + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    return order.astype(np.int64), w


# ---------------------------------------------------------------------------
# batched variants used by the networks (indices offset into flattened rows)
# ---------------------------------------------------------------------------

def batch_knn(flat_feats: np.ndarray, b: int, n: int, k: int) -> np.ndarray:
    """Per-sample kNN on (b*n, C) flattened features; returns global row indices."""
    out = np.empty((b * n, k), dtype=np.int64)
    for i in range(b):
        block = np.ascontiguousarray(flat_feats[i * n:(i + 1) * n], dtype=np.float64)
        if k >= n:
            raise ParameterError(f"batch_knn: k={k} must be < N={n}")
        out[i * n:(i + 1) * n] = kernels.knn(block, k) + i * n
    return out


def canonical_start(points: np.ndarray) -> int:
    """Index of the point farthest from the centroid (ties: lowest index).

    Depends only on the point set, not its ordering, so sampling started
    here is consistent under input permutations.
    """
    c = points.mean(axis=0)
    d2 = ((points - c) ** 2).sum(axis=1)
    return int(np.argmax(d2))


def batch_fps(coords: np.ndarray, m: int) -> np.ndarray:
    """Per-sample FPS on (b, n, 3) coords with canonical starts; global indices."""
    b, n, _ = coords.shape
    out = np.empty(b * m, dtype=np.int64)
    for i in range(b):
        block = np.ascontiguousarray(coords[i], dtype=np.float64)
        start = canonical_start(block)
        out[i * m:(i + 1) * m] = kernels.fps(block, m, start) + i * n
    return out

"""Ablation layers interchangeable with the channel-encoding layer.

All variants implement the same interface as tce_forward:
(coords, feats, idx, params, train, ...) -> N x C_out features, so the
networks can swap them without structural changes. The attention
baselines are minimal faithful stand-ins (a squeeze-style channel gate
and a per-neighborhood scalar-softmax attention), not reconstructions
of any particular published architecture.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from tcenet import tensor as T
from tcenet.tce import ConfigurationError, he_uniform, response_pool

VARIANTS = ("tce", "graphconv", "cw_attn", "pw_attn")
POOLS = ("max", "mean", "sum")


@dataclass
class LayerVariant:
    kind: str = "tce"
    pool: str = "max"   # channel-direction pooling; only meaningful for kind == "tce"

    def validate(self):
        if self.kind not in VARIANTS:
            raise ConfigurationError(f"unknown layer variant {self.kind!r}; pick from {VARIANTS}")
        if self.pool not in POOLS:
            raise ConfigurationError(f"unknown pool {self.pool!r}; pick from {POOLS}")


@dataclass
class EdgeConvParams:
    w: T.Tensor
    b: T.Tensor
    bn: T.BatchNorm


def init_edgeconv_params(c_in: int, c_out: int, rng, dtype=np.float32) -> EdgeConvParams:
    return EdgeConvParams(
        w=T.Tensor(he_uniform(2 * c_in, c_out, rng, dtype), requires_grad=True),
        b=T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        bn=T.BatchNorm(c_out, dtype=dtype),
    )


def edgeconv_forward(feats: T.Tensor, idx: np.ndarray, params: EdgeConvParams, train: bool) -> T.Tensor:
    """f'_i = max over neighbors j of LeakyReLU(BN(MLP(f_i, f_j - f_i)))."""
    n, k = idx.shape
    center = np.repeat(np.arange(n, dtype=np.int64), k)
    flat = idx.reshape(-1).astype(np.int64)
    fi = T.gather_rows(feats, center)
    fj = T.gather_rows(feats, flat)
    pairs = T.concat_axis([fi, T.sub(fj, fi)], axis=1)
    y = T.leaky_relu(T.batch_norm(T.linear(pairs, params.w, params.b), params.bn, train))
    c_out = params.w.data.shape[1]
    return T.max_reduce_axis(T.reshape(y, (n, k, c_out)), axis=1)


@dataclass
class ChannelGateParams:
    """Squeeze-style gate (global average -> bottleneck -> sigmoid) in
    front of a graph convolution."""

    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor
    edge: EdgeConvParams


def init_channel_gate_params(c_in: int, c_out: int, rng, dtype=np.float32,
                             bottleneck_ratio: int = 4) -> ChannelGateParams:
    hidden = max(1, c_in // bottleneck_ratio)
    return ChannelGateParams(
        w1=T.Tensor(he_uniform(c_in, hidden, rng, dtype), requires_grad=True),
        b1=T.Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        w2=T.Tensor(he_uniform(hidden, c_in, rng, dtype), requires_grad=True),
        b2=T.Tensor(np.zeros(c_in, dtype=dtype), requires_grad=True),
        edge=init_edgeconv_params(c_in, c_out, rng, dtype),
    )


def channel_attention_forward(feats: T.Tensor, idx: np.ndarray, params: ChannelGateParams,
                              train: bool, batch_shape: tuple[int, int]) -> T.Tensor:
    """Per-channel sigmoid gate from a global average over each cloud's
    points, applied before a graph convolution."""
    b, n = batch_shape
    c = feats.data.shape[1]
    per_cloud = T.mean_reduce_axis(T.reshape(feats, (b, n, c)), axis=1)      # (B, C)
    gate = T.sigmoid(T.linear(T.leaky_relu(T.linear(per_cloud, params.w1, params.b1)),
                              params.w2, params.b2))                         # (B, C)
    gated = T.mul(T.reshape(feats, (b, n, c)), T.reshape(gate, (b, 1, c)))
    return edgeconv_forward(T.reshape(gated, (b * n, c)), idx, params.edge, train)


@dataclass
class PointAttnParams:
    """Scalar attention per neighbor: softmax over the k scores of
    MLP(f_i, f_j - f_i), weighting value-mapped neighbor features."""

    score_w: T.Tensor
    score_b: T.Tensor
    value_w: T.Tensor
    value_b: T.Tensor
    bn: T.BatchNorm


def init_point_attn_params(c_in: int, c_out: int, rng, dtype=np.float32) -> PointAttnParams:
    return PointAttnParams(
        score_w=T.Tensor(he_uniform(2 * c_in, 1, rng, dtype), requires_grad=True),
        score_b=T.Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        value_w=T.Tensor(he_uniform(c_in, c_out, rng, dtype), requires_grad=True),
        value_b=T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        bn=T.BatchNorm(c_out, dtype=dtype),
    )


def point_attention_forward(feats: T.Tensor, idx: np.ndarray, params: PointAttnParams,
                            train: bool) -> T.Tensor:
    n, k = idx.shape
    center = np.repeat(np.arange(n, dtype=np.int64), k)
    flat = idx.reshape(-1).astype(np.int64)
    fi = T.gather_rows(feats, center)
    fj = T.gather_rows(feats, flat)
    pairs = T.concat_axis([fi, T.sub(fj, fi)], axis=1)
    scores = T.reshape(T.linear(pairs, params.score_w, params.score_b), (n, k))
    weights = T.softmax_axis(scores, axis=1)                                  # (N, k)
    vals = T.reshape(T.linear(fj, params.value_w, params.value_b),
                     (n, k, params.value_w.data.shape[1]))
    mixed = T.sum_reduce_axis(T.mul(vals, T.reshape(weights, (n, k, 1))), axis=1)
    return T.leaky_relu(T.batch_norm(mixed, params.bn, train))


def tce_pool_variant(attn: T.Tensor, values: T.Tensor, pool: str) -> T.Tensor:
    """Channel-direction reduction of the excited attention grid with a
    selectable reduction (max / mean / sum)."""
    if pool not in POOLS:
        raise ConfigurationError(f"tce_pool_variant: unknown pool {pool!r}")
    return response_pool(attn, values, pool)

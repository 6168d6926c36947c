"""The channel-encoding attention layer.

For every (point, neighbor) pair the layer builds a query from raw
coordinates (absolute + relative, 6 channels, no learned transform), a
key from features through a small MLP, and one value map per query
channel. The outer product of query and key channels forms a 6 x C
attention grid; a softmax down each column (over the 6 coordinate
channels) normalizes it, the values excite it elementwise, and a
max-pool down the same axis keeps the strongest coordinate-channel
response per feature channel. A 1x1 convolution, batch norm and
LeakyReLU finish the encoding before max-aggregation over the k
neighbors. No positional encoding is used anywhere.

Two equivalent execution paths exist for the attention core: the
granular ops below (used by the pooling ablations and exposed for
inspection) and a fused kernel (used by tce_forward for max pooling;
see tcenet.kernels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tcenet import kernels
from tcenet import tensor as T

QUERY_CHANNELS = 6  # 3 absolute + 3 relative coordinate channels


class ConfigurationError(ValueError):
    """Layer parameters are inconsistent with the requested shapes."""


@dataclass
class TceConfig:
    in_channels: int
    out_channels: int
    k: int
    query_channels: int = QUERY_CHANNELS


@dataclass
class TceParams:
    """Learnables for one layer: key MLP, per-query-channel value maps,
    and the closing 1x1 conv, each with its batch norm where applicable."""

    key_w: T.Tensor
    key_b: T.Tensor
    key_bn: T.BatchNorm
    value_ws: list = field(default_factory=list)   # query_channels maps, C_out -> C_out
    value_bs: list = field(default_factory=list)
    conv_w: T.Tensor = None
    conv_b: T.Tensor = None
    conv_bn: T.BatchNorm = None


def he_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_tce_params(c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32,
                    dq: int = QUERY_CHANNELS) -> TceParams:
    p = TceParams(
        key_w=T.Tensor(he_uniform(2 * c_in, c_out, rng, dtype), requires_grad=True),
        key_b=T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        key_bn=T.BatchNorm(c_out, dtype=dtype),
    )
    for _ in range(dq):
        p.value_ws.append(T.Tensor(he_uniform(c_out, c_out, rng, dtype), requires_grad=True))
        p.value_bs.append(T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))
    p.conv_w = T.Tensor(he_uniform(c_out, c_out, rng, dtype), requires_grad=True)
    p.conv_b = T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    p.conv_bn = T.BatchNorm(c_out, dtype=dtype)
    return p


def _pair_indices(idx: np.ndarray):
    n, k = idx.shape
    center = np.repeat(np.arange(n, dtype=np.int64), k)
    return center, idx.reshape(-1).astype(np.int64)


def build_query(coords: T.Tensor, idx: np.ndarray) -> T.Tensor:
    """Q[i][n] = (x_i, x_j - x_i) for neighbor j = idx[i][n]; no learnables."""
    n, k = idx.shape
    center, flat = _pair_indices(idx)
    ci = T.gather_rows(coords, center)
    cj = T.gather_rows(coords, flat)
    q = T.concat_axis([ci, T.sub(cj, ci)], axis=1)
    return T.reshape(q, (n, k, 2 * coords.data.shape[1]))


def build_key(feats: T.Tensor, idx: np.ndarray, params: TceParams, train: bool) -> T.Tensor:
    """K = LeakyReLU(BN(MLP(f_i, f_j - f_i))) per (point, neighbor)."""
    n, k = idx.shape
    center, flat = _pair_indices(idx)
    fi = T.gather_rows(feats, center)
    fj = T.gather_rows(feats, flat)
    pairs = T.concat_axis([fi, T.sub(fj, fi)], axis=1)
    key = T.leaky_relu(T.batch_norm(T.linear(pairs, params.key_w, params.key_b), params.key_bn, train))
    return T.reshape(key, (n, k, params.key_w.data.shape[1]))


def build_value(key: T.Tensor, params: TceParams) -> T.Tensor:
    """Stack the per-query-channel value maps: V[..., p, :] = MLP_p(K)."""
    dq = QUERY_CHANNELS
    if len(params.value_ws) != dq or len(params.value_bs) != dq:
        raise ConfigurationError(f"build_value: expected {dq} value maps, got {len(params.value_ws)}")
    lead = key.data.shape[:-1]
    c_out = params.value_ws[0].data.shape[1]
    w_cat = T.concat_axis(params.value_ws, axis=1)     # (C_out, dq*C_out)
    b_cat = T.concat_axis(params.value_bs, axis=0)
    v = T.linear(key, w_cat, b_cat)                    # (..., dq*C_out)
    return T.reshape(v, (*lead, dq, c_out))


def channel_attention(q: T.Tensor, k: T.Tensor) -> T.Tensor:
    """Attention grid: elementwise products q[p] * k[c], softmaxed down
    each column (over the coordinate-channel axis)."""
    if q.data.shape[:-1] != k.data.shape[:-1]:
        raise T.DimensionError(f"channel_attention: leading dims {q.data.shape} vs {k.data.shape}")
    lead = q.data.shape[:-1]
    dq = q.data.shape[-1]
    c = k.data.shape[-1]
    grid = T.mul(T.reshape(q, (*lead, dq, 1)), T.reshape(k, (*lead, 1, c)))
    return T.softmax_axis(grid, axis=-2)


def response_pool(attn: T.Tensor, values: T.Tensor, pool: str = "max") -> T.Tensor:
    """Excite the attention grid with values and reduce over the
    coordinate-channel axis (max keeps the strongest response)."""
    if attn.data.shape != values.data.shape:
        raise T.DimensionError(f"response_pool: {attn.data.shape} vs {values.data.shape}")
    responses = T.mul(attn, values)
    if pool == "max":
        return T.max_reduce_axis(responses, axis=-2)
    if pool == "mean":
        return T.mean_reduce_axis(responses, axis=-2)
    if pool == "sum":
        return T.sum_reduce_axis(responses, axis=-2)
    raise ConfigurationError(f"response_pool: unknown pool {pool!r}")


def channel_response_pool(attn: T.Tensor, values: T.Tensor) -> T.Tensor:
    return response_pool(attn, values, "max")


def fused_attention_pool(q: T.Tensor, k: T.Tensor, v: T.Tensor) -> T.Tensor:
    """Single-op equivalent of channel_response_pool(channel_attention(q, k), v).

    Shapes: q (..., dq), k (..., C), v (..., dq, C) -> (..., C). The active
    kernel backend does the grid/softmax/pool in one pass and its backward
    routes gradients through the saved attention grid and argmax record.
    """
    lead = q.data.shape[:-1]
    dq = q.data.shape[-1]
    c = k.data.shape[-1]
    if k.data.shape[:-1] != lead or v.data.shape != (*lead, dq, c):
        raise T.DimensionError(
            f"fused_attention_pool: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}")
    q2 = q.data.reshape(-1, dq)
    k2 = k.data.reshape(-1, c)
    v3 = v.data.reshape(-1, dq, c)
    out, attn, arg = kernels.attention_pool_forward(q2, k2, v3)

    def make_backward(out_t):
        def backward():
            g = np.ascontiguousarray(out_t.grad.reshape(-1, c))
            dq_, dk_, dv_ = kernels.attention_pool_backward(g, attn, arg, q2, k2, v3)
            T.accumulate_grad(q, dq_.reshape(q.data.shape))
            T.accumulate_grad(k, dk_.reshape(k.data.shape))
            T.accumulate_grad(v, dv_.reshape(v.data.shape))
        return backward

    return T.apply_op("fused_attention_pool", (q, k, v), out.reshape(*lead, c), make_backward)


def tce_forward(coords: T.Tensor, feats: T.Tensor, idx: np.ndarray, params: TceParams,
                train: bool, pool: str = "max") -> T.Tensor:
    """Full layer: encode each neighborhood and max-aggregate over neighbors.

    ``idx`` must come from the current layer's input features. Order of the
    closing stage is Conv1x1 -> BN -> LeakyReLU, then max over the k
    neighbors.
    """
    n, k_count = idx.shape
    q = build_query(coords, idx)                        # (N, k, dq)
    key = build_key(feats, idx, params, train)          # (N, k, C_out)
    values = build_value(key, params)                   # (N, k, dq, C_out)
    if pool == "max":
        pooled = fused_attention_pool(q, key, values)   # (N, k, C_out)
    else:
        pooled = response_pool(channel_attention(q, key), values, pool)
    c_out = params.conv_w.data.shape[1]
    flat = T.reshape(pooled, (n * k_count, c_out))
    y = T.leaky_relu(T.batch_norm(T.linear(flat, params.conv_w, params.conv_b), params.conv_bn, train))
    return T.max_reduce_axis(T.reshape(y, (n, k_count, c_out)), axis=1)


def tce_param_tensors(params: TceParams):
    """(suffix, tensor) pairs in deterministic order, for registration."""
    items = [("key.w", params.key_w), ("key.b", params.key_b),
             ("key_bn.gamma", params.key_bn.gamma), ("key_bn.beta", params.key_bn.beta)]
    for i, (w, b) in enumerate(zip(params.value_ws, params.value_bs)):
        items.append((f"value{i}.w", w))
        items.append((f"value{i}.b", b))
    items += [("conv.w", params.conv_w), ("conv.b", params.conv_b),
              ("conv_bn.gamma", params.conv_bn.gamma), ("conv_bn.beta", params.conv_bn.beta)]
    return items

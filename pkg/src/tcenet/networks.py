"""Classification and segmentation networks.

Both share two channel-encoding layers; feature extraction is standard
graph convolution (two layers for classification, three on a
farthest-point-sampled subset for segmentation, interpolated back up).
Every layer rebuilds its kNN graph from its own input features, so the
graph is dynamic. Batches are processed as flattened rows with
block-offset neighbor indices; batch norm therefore normalizes over all
points of the batch for per-point features and over the batch for
global ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tcenet import baselines, neighborhood, tce
from tcenet import tensor as T
from tcenet.tce import ConfigurationError


@dataclass
class NetworkConfig:
    task: str                       # "classification" | "segmentation"
    num_classes: int                # classes, or part labels for segmentation
    k: int = 20
    variant: str = "tce"
    pool: str = "max"
    tce_dims: tuple = (64, 64)
    graph_dims: tuple = ()          # () -> task default in __post_init__
    embed_dim: int = 1024
    head_dims: tuple = (512, 256)
    seg_head_dims: tuple = (256, 128)
    fps_ratio: float = 0.25
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.task not in ("classification", "segmentation"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if not self.graph_dims:
            self.graph_dims = (128, 256) if self.task == "classification" else (128, 256, 256)
        baselines.LayerVariant(self.variant, self.pool).validate()
        if not 0.0 < self.fps_ratio <= 1.0:
            raise ConfigurationError(f"fps_ratio must be in (0, 1], got {self.fps_ratio}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class ModelParams:
    """Flat, insertion-ordered registry of learnable tensors plus the
    batch-norm layers whose running statistics persist to checkpoints."""

    tensors: dict = field(default_factory=dict)
    bns: dict = field(default_factory=dict)

    def add(self, name: str, t: T.Tensor):
        if name in self.tensors:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self.tensors[name] = t

    def add_bn(self, name: str, bn: T.BatchNorm):
        if name in self.bns:
            raise ConfigurationError(f"duplicate batch norm name {name!r}")
        self.bns[name] = bn

    def state_arrays(self):
        """(name, array) pairs for every persistent buffer, stable order."""
        for name, t in self.tensors.items():
            yield name, t.data
        for name, bn in self.bns.items():
            yield f"{name}.running_mean", bn.running_mean
            yield f"{name}.running_var", bn.running_var

    def load_state_arrays(self, arrays: dict):
        expected = dict(self.state_arrays())
        if set(arrays) != set(expected):
            missing = set(expected) - set(arrays)
            extra = set(arrays) - set(expected)
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in self.tensors.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ConfigurationError(f"{name}: shape {src.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(src, dtype=t.data.dtype)
        for name, bn in self.bns.items():
            bn.running_mean = np.ascontiguousarray(arrays[f"{name}.running_mean"], dtype=bn.running_mean.dtype)
            bn.running_var = np.ascontiguousarray(arrays[f"{name}.running_var"], dtype=bn.running_var.dtype)

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None


@dataclass
class LinearBn:
    w: T.Tensor
    b: T.Tensor
    bn: T.BatchNorm


@dataclass
class Dense:
    w: T.Tensor
    b: T.Tensor


@dataclass
class Model:
    config: NetworkConfig
    params: ModelParams
    layers: dict
    dtype: np.dtype


def param_count(params: ModelParams) -> int:
    """Total element count over all learnable tensors."""
    return sum(t.data.size for t in params.tensors.values())


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _register(reg: ModelParams, prefix: str, layer):
    if isinstance(layer, tce.TceParams):
        for suffix, t in tce.tce_param_tensors(layer):
            reg.add(f"{prefix}.{suffix}", t)
        reg.add_bn(f"{prefix}.key_bn", layer.key_bn)
        reg.add_bn(f"{prefix}.conv_bn", layer.conv_bn)
    elif isinstance(layer, baselines.EdgeConvParams):
        reg.add(f"{prefix}.w", layer.w)
        reg.add(f"{prefix}.b", layer.b)
        reg.add(f"{prefix}.bn.gamma", layer.bn.gamma)
        reg.add(f"{prefix}.bn.beta", layer.bn.beta)
        reg.add_bn(f"{prefix}.bn", layer.bn)
    elif isinstance(layer, baselines.ChannelGateParams):
        reg.add(f"{prefix}.w1", layer.w1)
        reg.add(f"{prefix}.b1", layer.b1)
        reg.add(f"{prefix}.w2", layer.w2)
        reg.add(f"{prefix}.b2", layer.b2)
        _register(reg, f"{prefix}.edge", layer.edge)
    elif isinstance(layer, baselines.PointAttnParams):
        reg.add(f"{prefix}.score.w", layer.score_w)
        reg.add(f"{prefix}.score.b", layer.score_b)
        reg.add(f"{prefix}.value.w", layer.value_w)
        reg.add(f"{prefix}.value.b", layer.value_b)
        reg.add(f"{prefix}.bn.gamma", layer.bn.gamma)
        reg.add(f"{prefix}.bn.beta", layer.bn.beta)
        reg.add_bn(f"{prefix}.bn", layer.bn)
    elif isinstance(layer, LinearBn):
        reg.add(f"{prefix}.w", layer.w)
        reg.add(f"{prefix}.b", layer.b)
        reg.add(f"{prefix}.bn.gamma", layer.bn.gamma)
        reg.add(f"{prefix}.bn.beta", layer.bn.beta)
        reg.add_bn(f"{prefix}.bn", layer.bn)
    elif isinstance(layer, Dense):
        reg.add(f"{prefix}.w", layer.w)
        reg.add(f"{prefix}.b", layer.b)
    else:
        raise ConfigurationError(f"cannot register layer type {type(layer).__name__}")


def _init_encoder(kind: str, c_in: int, c_out: int, rng, dtype):
    if kind == "tce":
        return tce.init_tce_params(c_in, c_out, rng, dtype)
    if kind == "graphconv":
        return baselines.init_edgeconv_params(c_in, c_out, rng, dtype)
    if kind == "cw_attn":
        return baselines.init_channel_gate_params(c_in, c_out, rng, dtype)
    if kind == "pw_attn":
        return baselines.init_point_attn_params(c_in, c_out, rng, dtype)
    raise ConfigurationError(f"unknown variant {kind!r}")


def _init_linear_bn(c_in, c_out, rng, dtype):
    return LinearBn(
        w=T.Tensor(tce.he_uniform(c_in, c_out, rng, dtype), requires_grad=True),
        b=T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        bn=T.BatchNorm(c_out, dtype=dtype),
    )


def _init_dense(c_in, c_out, rng, dtype):
    return Dense(
        w=T.Tensor(tce.he_uniform(c_in, c_out, rng, dtype), requires_grad=True),
        b=T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
    )


def init_model(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    layers = {}
    reg = ModelParams()
    d1, d2 = config.tce_dims
    layers["enc1"] = _init_encoder(config.variant, 3, d1, rng, dtype)
    layers["enc2"] = _init_encoder(config.variant, d1, d2, rng, dtype)
    widths = [d2, *config.graph_dims]
    for i, (ci, co) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        layers[f"gc{i}"] = baselines.init_edgeconv_params(ci, co, rng, dtype)
    if config.task == "classification":
        cat = d2 + sum(config.graph_dims)
        layers["embed"] = _init_linear_bn(cat, config.embed_dim, rng, dtype)
        h1, h2 = config.head_dims
        layers["fc1"] = _init_linear_bn(config.embed_dim, h1, rng, dtype)
        layers["fc2"] = _init_linear_bn(h1, h2, rng, dtype)
        layers["out"] = _init_dense(h2, config.num_classes, rng, dtype)
    else:
        cat = config.graph_dims[-1] + d2
        s1, s2 = config.seg_head_dims
        layers["head1"] = _init_linear_bn(cat, s1, rng, dtype)
        layers["head2"] = _init_linear_bn(s1, s2, rng, dtype)
        layers["out"] = _init_dense(s2, config.num_classes, rng, dtype)
    for name, layer in layers.items():
        _register(reg, name, layer)
    return Model(config=config, params=reg, layers=layers, dtype=np.dtype(dtype))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _encode(model: Model, name: str, coords: T.Tensor, feats: T.Tensor, idx: np.ndarray,
            train: bool, batch_shape) -> T.Tensor:
    kind = model.config.variant
    layer = model.layers[name]
    if kind == "tce":
        return tce.tce_forward(coords, feats, idx, layer, train, pool=model.config.pool)
    if kind == "graphconv":
        return baselines.edgeconv_forward(feats, idx, layer, train)
    if kind == "cw_attn":
        return baselines.channel_attention_forward(feats, idx, layer, train, batch_shape)
    return baselines.point_attention_forward(feats, idx, layer, train)


def _check_cloud_batch(coords: np.ndarray, k: int):
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ValueError(f"expected (B, N, 3) coordinates, got {coords.shape}")
    if coords.shape[1] < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points per cloud, got {coords.shape[1]}")


def classify_forward(model: Model, coords: np.ndarray, train: bool,
                     rng: Optional[np.random.Generator] = None) -> T.Tensor:
    """Logits (B, num_classes) for a batch of clouds (B, N, 3)."""
    cfg = model.config
    _check_cloud_batch(coords, cfg.k)
    b, n, _ = coords.shape
    flat = np.ascontiguousarray(coords.reshape(-1, 3), dtype=model.dtype)
    pts = T.Tensor(flat)
    x = pts
    encoded = []
    for name in ("enc1", "enc2"):
        idx = neighborhood.batch_knn(x.data, b, n, cfg.k)
        x = _encode(model, name, pts, x, idx, train, (b, n))
    encoded.append(x)
    for i in range(1, len(cfg.graph_dims) + 1):
        idx = neighborhood.batch_knn(x.data, b, n, cfg.k)
        x = baselines.edgeconv_forward(x, idx, model.layers[f"gc{i}"], train)
        encoded.append(x)
    cat = T.concat_axis(encoded, axis=1)
    emb = model.layers["embed"]
    y = T.leaky_relu(T.batch_norm(T.linear(cat, emb.w, emb.b), emb.bn, train))
    pooled = T.max_reduce_axis(T.reshape(y, (b, n, cfg.embed_dim)), axis=1)   # (B, embed)
    h = pooled
    for name in ("fc1", "fc2"):
        lay = model.layers[name]
        h = T.leaky_relu(T.batch_norm(T.linear(h, lay.w, lay.b), lay.bn, train))
        h = T.dropout(h, cfg.dropout_rate, train, rng)
    out = model.layers["out"]
    return T.linear(h, out.w, out.b)


def segment_forward(model: Model, coords: np.ndarray, train: bool,
                    rng: Optional[np.random.Generator] = None) -> T.Tensor:
    """Per-point logits (B, N, num_parts) for a batch of clouds (B, N, 3)."""
    cfg = model.config
    _check_cloud_batch(coords, cfg.k)
    b, n, _ = coords.shape
    coords = np.ascontiguousarray(coords, dtype=model.dtype)
    flat = coords.reshape(-1, 3)
    pts = T.Tensor(flat)
    x = pts
    for name in ("enc1", "enc2"):
        idx = neighborhood.batch_knn(x.data, b, n, cfg.k)
        x = _encode(model, name, pts, x, idx, train, (b, n))
    skip = x                                                       # (B*N, d2)

    m = max(1, math.ceil(n * cfg.fps_ratio))
    if cfg.k >= m:
        raise ConfigurationError(f"k={cfg.k} must be < sampled size m={m}; raise fps_ratio or lower k")
    sub_idx = neighborhood.batch_fps(coords, m)                    # (B*m,) global rows
    sub = T.gather_rows(x, sub_idx)
    for i in range(1, len(cfg.graph_dims) + 1):
        idx = neighborhood.batch_knn(sub.data, b, m, cfg.k)
        sub = baselines.edgeconv_forward(sub, idx, model.layers[f"gc{i}"], train)

    # inverse-distance interpolation back to the full cloud, per sample
    nn = min(3, m)
    gidx = np.empty((b * n, nn), dtype=np.int64)
    gw = np.empty((b * n, nn), dtype=np.float64)
    sub_rows = sub_idx.reshape(b, m)
    for i in range(b):
        cc = flat[sub_rows[i]].astype(np.float64)                  # coarse coords of sample i
        order, w = neighborhood.interpolation_weights(cc, coords[i].astype(np.float64), nn)
        gidx[i * n:(i + 1) * n] = order + i * m
        gw[i * n:(i + 1) * n] = w
    gathered = T.gather_rows(sub, gidx)                            # (B*N, nn, C)
    wt = T.Tensor(gw[:, :, None].astype(model.dtype))
    interp = T.sum_reduce_axis(T.mul(gathered, wt), axis=1)        # (B*N, C)

    h = T.concat_axis([interp, skip], axis=1)
    for name in ("head1", "head2"):
        lay = model.layers[name]
        h = T.leaky_relu(T.batch_norm(T.linear(h, lay.w, lay.b), lay.bn, train))
        h = T.dropout(h, cfg.dropout_rate, train, rng)
    out = model.layers["out"]
    logits = T.linear(h, out.w, out.b)
    return T.reshape(logits, (b, n, cfg.num_classes))


def forward(model: Model, coords: np.ndarray, train: bool,
            rng: Optional[np.random.Generator] = None) -> T.Tensor:
    if model.config.task == "classification":
        return classify_forward(model, coords, train, rng)
    return segment_forward(model, coords, train, rng)

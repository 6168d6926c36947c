"""Central finite-difference gradient oracle.

grad_check runs a scalar-valued computation once under a tape, then
perturbs every element of every watched input by +/-eps and compares
(f(x+eps) - f(x-eps)) / (2 eps) against the tape gradient. All checks
are fp64: finite differences are not trustworthy at fp32. The relative
error uses |ad - fd| / max(1, |ad|, |fd|), so near-zero gradients are
compared absolutely.

The registry at the bottom provides ready-made check targets (each op,
each layer variant, tiny end-to-end networks) for the CLI and the test
suite. Targets use fixed seeds so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from tcenet import baselines, networks, tce
from tcenet import tensor as T


class OracleError(RuntimeError):
    """The check itself is invalid (non-fp64 inputs, non-deterministic f, ...)."""


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float
    per_input: list = field(default_factory=list)   # (label, max rel err) pairs

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def grad_check(f: Callable[[], T.Tensor], inputs: Sequence[T.Tensor], eps: float = 1e-5,
               tol: float = 1e-4, name: str = "f", labels: Sequence[str] = ()) -> GradCheckResult:
    """Compare tape gradients of the scalar f() against central differences.

    ``inputs`` are the tensors to perturb; f must be a deterministic closure
    over them (it is re-run many times). Gradients w.r.t. each element are
    checked; the report carries the max relative error per input.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise OracleError(f"{name}: grad_check requires fp64 inputs")
        t.requires_grad = True
        t.grad = None
    with T.Tape() as tape:
        out = f()
        if out.data.size != 1:
            raise OracleError(f"{name}: f must be scalar-valued, got shape {out.data.shape}")
        tape.backward(out)
    y0 = out.data.copy()
    if not np.array_equal(f().data, y0):
        raise OracleError(f"{name}: f is not deterministic (two forward passes disagree)")
    ad_grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    labels = list(labels) or [f"input{i}" for i in range(len(inputs))]
    per_input = []
    worst = 0.0
    for t, ad, label in zip(inputs, ad_grads, labels):
        flat = t.data.reshape(-1)
        fd = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            yp = f().data.reshape(())
            flat[i] = orig - eps
            ym = f().data.reshape(())
            flat[i] = orig
            fd[i] = (yp - ym) / (2.0 * eps)
        err = float(_rel_err(ad.reshape(-1), fd).max()) if flat.size else 0.0
        per_input.append((label, err))
        worst = max(worst, err)
    return GradCheckResult(name=name, max_rel_err=worst, tol=tol, per_input=per_input)


# ---------------------------------------------------------------------------
# registered check targets
# ---------------------------------------------------------------------------

def _t(rng, *shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64, requires_grad=True)


def _scalar(x: T.Tensor) -> T.Tensor:
    flat = T.reshape(x, (x.data.size,))
    return T.sum_reduce_axis(T.mul(flat, flat), 0)   # sum of squares mixes all elements


def op_checks() -> dict[str, Callable[[float, float], GradCheckResult]]:
    """One gradient check per primitive op, on a few random fp64 shapes."""

    def check_many(name, build):
        def run(eps, tol):
            worst = GradCheckResult(name, 0.0, tol)
            for seed in (0, 1, 2):
                rng = np.random.default_rng(100 + seed)
                f, inputs, labels = build(rng)
                r = grad_check(f, inputs, eps, tol, name=f"{name}[seed{seed}]", labels=labels)
                if r.max_rel_err > worst.max_rel_err:
                    worst = GradCheckResult(name, r.max_rel_err, tol, r.per_input)
            return worst
        return run

    def linear_case(rng):
        x, w, b = _t(rng, 3, 4), _t(rng, 4, 5), _t(rng, 5)
        return (lambda: _scalar(T.linear(x, w, b))), [x, w, b], ["x", "w", "b"]

    def softmax_case(rng):
        x = _t(rng, 4, 6)
        return (lambda: _scalar(T.softmax_axis(x, 1))), [x], ["x"]

    def log_softmax_case(rng):
        x = _t(rng, 4, 6)
        return (lambda: _scalar(T.log_softmax_axis(x, 1))), [x], ["x"]

    def max_reduce_case(rng):
        x = _t(rng, 4, 6)
        return (lambda: _scalar(T.max_reduce_axis(x, 0))), [x], ["x"]

    def sum_mean_case(rng):
        x = _t(rng, 3, 5)
        return (lambda: _scalar(T.add(T.sum_reduce_axis(x, 0), T.mean_reduce_axis(x, 0)))), [x], ["x"]

    def elementwise_case(rng):
        a, bb = _t(rng, 3, 4), _t(rng, 4)   # broadcast over rows
        return (lambda: _scalar(T.mul(T.add(a, bb), T.sub(a, bb)))), [a, bb], ["a", "b"]

    def concat_case(rng):
        a, bb = _t(rng, 3, 2), _t(rng, 3, 4)
        return (lambda: _scalar(T.concat_axis([a, bb], 1))), [a, bb], ["a", "b"]

    def gather_case(rng):
        x = _t(rng, 5, 3)
        idx = rng.integers(0, 5, size=(4, 2))
        return (lambda: _scalar(T.gather_rows(x, idx))), [x], ["x"]

    def leaky_case(rng):
        x = _t(rng, 4, 4)
        x.data[np.abs(x.data) < 1e-3] += 0.1   # keep clear of the kink
        return (lambda: _scalar(T.leaky_relu(x, 0.2))), [x], ["x"]

    def sigmoid_case(rng):
        x = _t(rng, 4, 4)
        return (lambda: _scalar(T.sigmoid(x))), [x], ["x"]

    def batch_norm_case(rng):
        x = _t(rng, 8, 3)
        bn = T.BatchNorm(3, dtype=np.float64)
        bn.gamma.data = rng.uniform(0.5, 1.5, 3)
        bn.beta.data = rng.uniform(-0.5, 0.5, 3)
        return (lambda: _scalar(T.batch_norm(x, bn, train=True))), [x, bn.gamma, bn.beta], ["x", "gamma", "beta"]

    def dropout_case(rng):
        x = _t(rng, 6, 4)
        seed = int(rng.integers(0, 2**31))
        # fresh generator per call -> identical mask -> deterministic f
        return (lambda: _scalar(T.dropout(x, 0.5, True, np.random.default_rng(seed)))), [x], ["x"]

    def cross_entropy_case(rng):
        x = _t(rng, 5, 4)
        labels = rng.integers(0, 4, size=5)
        return (lambda: T.cross_entropy(x, labels)), [x], ["logits"]

    def fused_attention_case(rng):
        q, k = _t(rng, 10, 6), _t(rng, 10, 5)
        v = _t(rng, 10, 6, 5)
        return (lambda: _scalar(tce.fused_attention_pool(q, k, v))), [q, k, v], ["q", "k", "v"]

    def reshape_case(rng):
        x = _t(rng, 2, 6)
        return (lambda: _scalar(T.reshape(x, (3, 4)))), [x], ["x"]

    cases = {
        "linear": linear_case,
        "softmax_axis": softmax_case,
        "log_softmax_axis": log_softmax_case,
        "max_reduce_axis": max_reduce_case,
        "sum_mean_reduce": sum_mean_case,
        "add_sub_mul": elementwise_case,
        "concat_axis": concat_case,
        "gather_rows": gather_case,
        "leaky_relu": leaky_case,
        "sigmoid": sigmoid_case,
        "batch_norm": batch_norm_case,
        "dropout": dropout_case,
        "cross_entropy": cross_entropy_case,
        "reshape": reshape_case,
        "fused_attention_pool": fused_attention_case,
    }
    return {name: check_many(name, build) for name, build in cases.items()}


def _layer_inputs(rng, n=8, k=3, c_in=3):
    coords = T.Tensor(rng.uniform(-1, 1, (n, 3)), dtype=np.float64)
    feats = _t(rng, n, c_in)
    idx = np.stack([rng.permutation(np.delete(np.arange(n), i))[:k] for i in range(n)])
    return coords, feats, idx


def layer_checks() -> dict[str, Callable[[float, float], GradCheckResult]]:
    """Full-layer checks: the channel encoder (all pools) and each baseline."""

    def tce_check(pool):
        def run(eps, tol):
            rng = np.random.default_rng(7)
            coords, feats, idx = _layer_inputs(rng)
            params = tce.init_tce_params(3, 8, rng, np.float64)
            tensors = [feats] + [t for _, t in tce.tce_param_tensors(params)]
            labels = ["feats"] + [s for s, _ in tce.tce_param_tensors(params)]
            f = lambda: _scalar(tce.tce_forward(coords, feats, idx, params, train=True, pool=pool))
            return grad_check(f, tensors, eps, tol, name=f"tce[{pool}]", labels=labels)
        return run

    def edgeconv_check(eps, tol):
        rng = np.random.default_rng(8)
        _, feats, idx = _layer_inputs(rng, c_in=4)
        params = baselines.init_edgeconv_params(4, 6, rng, np.float64)
        tensors = [feats, params.w, params.b, params.bn.gamma, params.bn.beta]
        f = lambda: _scalar(baselines.edgeconv_forward(feats, idx, params, train=True))
        return grad_check(f, tensors, eps, tol, name="graphconv",
                          labels=["feats", "w", "b", "gamma", "beta"])

    def cw_attn_check(eps, tol):
        rng = np.random.default_rng(9)
        _, feats, idx = _layer_inputs(rng, c_in=4)
        params = baselines.init_channel_gate_params(4, 6, rng, np.float64)
        tensors = [feats, params.w1, params.b1, params.w2, params.b2,
                   params.edge.w, params.edge.b, params.edge.bn.gamma, params.edge.bn.beta]
        labels = ["feats", "w1", "b1", "w2", "b2", "edge.w", "edge.b", "edge.gamma", "edge.beta"]
        f = lambda: _scalar(baselines.channel_attention_forward(feats, idx, params, True, (1, 8)))
        return grad_check(f, tensors, eps, tol, name="cw_attn", labels=labels)

    def pw_attn_check(eps, tol):
        rng = np.random.default_rng(10)
        _, feats, idx = _layer_inputs(rng, c_in=4)
        params = baselines.init_point_attn_params(4, 6, rng, np.float64)
        tensors = [feats, params.score_w, params.score_b, params.value_w, params.value_b,
                   params.bn.gamma, params.bn.beta]
        labels = ["feats", "score.w", "score.b", "value.w", "value.b", "gamma", "beta"]
        f = lambda: _scalar(baselines.point_attention_forward(feats, idx, params, train=True))
        return grad_check(f, tensors, eps, tol, name="pw_attn", labels=labels)

    return {
        "tce_max": tce_check("max"),
        "tce_mean": tce_check("mean"),
        "tce_sum": tce_check("sum"),
        "graphconv": edgeconv_check,
        "cw_attn": cw_attn_check,
        "pw_attn": pw_attn_check,
    }


def tiny_network_config(task: str) -> networks.NetworkConfig:
    return networks.NetworkConfig(
        task=task, num_classes=3, k=3, tce_dims=(8, 8),
        graph_dims=(8, 8) if task == "classification" else (8, 8, 8),
        embed_dim=16, head_dims=(8, 8), seg_head_dims=(8, 8),
        fps_ratio=0.5, dropout_rate=0.0,
    )


def network_checks() -> dict[str, Callable[[float, float], GradCheckResult]]:
    """End-to-end fp64 checks of tiny networks over every parameter tensor."""

    def net_check(task):
        def run(eps, tol):
            rng = np.random.default_rng(11)
            model = networks.init_model(tiny_network_config(task), seed=3, dtype=np.float64)
            coords = rng.uniform(-1, 1, (2, 16, 3))   # batch of 2 keeps the head BNs non-degenerate
            if task == "classification":
                labels = rng.integers(0, 3, size=2)
                f = lambda: T.cross_entropy(networks.forward(model, coords, train=True), labels)
            else:
                labels = rng.integers(0, 3, size=2 * 16)
                f = lambda: T.cross_entropy(
                    T.reshape(networks.forward(model, coords, train=True), (2 * 16, 3)), labels)
            tensors = list(model.params.tensors.values())
            names = list(model.params.tensors.keys())
            return grad_check(f, tensors, eps, tol, name=f"network[{task}]", labels=names)
        return run

    return {
        "network_classification": net_check("classification"),
        "network_segmentation": net_check("segmentation"),
    }


def all_checks(scope: str = "all"):
    reg = {}
    if scope in ("op", "all"):
        reg.update(op_checks())
    if scope in ("layer", "all"):
        reg.update(layer_checks())
    if scope in ("network", "all"):
        reg.update(network_checks())
    if not reg:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    return reg

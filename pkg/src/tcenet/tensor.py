"""Minimal dense-array engine with reverse-mode differentiation.

Tensors wrap contiguous fp32/fp64 numpy buffers. Each differentiable
operation validates its result (any NaN/Inf aborts with NumericError),
and, when a Tape is active and an input requires gradients, records a
node holding a backward closure. ``Tape.backward`` seeds the loss
gradient and walks the nodes exactly once in reverse recorded order,
which is a valid topological order because nodes are appended as the
forward pass executes.

The op set is deliberately small: affine maps, activations, softmax,
reductions, gather, concat, reshape, batch norm and dropout -- exactly
what the point-cloud networks need. Broadcasting is supported only in
the elementwise ops (add/sub/mul), where the backward pass sums
gradients over the broadcast axes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from tcenet import kernels

_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))


class NumericError(ArithmeticError):
    """A forward op produced (or received) a non-finite value."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """A shape-tagged fp32/fp64 array, optionally carrying a gradient.

    ``data`` is always C-contiguous; ``grad`` is either None or an array
    of identical shape and dtype. Tensors are treated as immutable after
    creation except for gradient accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d, but 0-d is always contiguous
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded op: its name, operand refs, output ref and backward closure."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable[[], None]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of forward ops; backward walks it once, reversed."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._stack.pop()
        return False

    @staticmethod
    def active() -> Optional["Tape"]:
        return Tape._stack[-1] if Tape._stack else None

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss) = 1 and propagate through all nodes."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.output.grad is not None:
                node.backward()


def _check_finite(op: str, arr: np.ndarray):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in output of '{op}'")


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def accumulate_grad(t: Tensor, g: np.ndarray):
    """Public accumulation hook for ops defined outside this module."""
    _accumulate(t, g)


def _norm_axis(axis: int, ndim: int) -> int:
    return axis + ndim if axis < 0 else axis


def apply_op(op: str, inputs: Sequence, out_data: np.ndarray, make_backward) -> Tensor:
    """Wrap an op result, validate it, and record it on the active tape.

    ``make_backward(out)`` must return a zero-argument closure computing
    input gradients from ``out.grad``. Recording happens only when a tape
    is active and some Tensor input requires gradients; otherwise the
    result is a plain constant and the closure is never built.
    """
    _check_finite(op, out_data)
    tape = Tape.active()
    tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
    needs = tape is not None and any(t.requires_grad for t in tensor_inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(TapeNode(op, tensor_inputs, out, make_backward(out)))
    return out


def _same_dtype(op: str, *tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise DimensionError(f"{op}: mixed dtypes {dt.name} and {t.dtype.name}")
    return dt


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# affine / elementwise ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis of x; x may have any leading shape."""
    _same_dtype("linear", x, w, b)
    din, dout = w.data.shape if w.data.ndim == 2 else (None, None)
    if w.data.ndim != 2 or x.data.shape[-1] != din:
        raise DimensionError(f"linear: x {x.data.shape} incompatible with w {w.data.shape}")
    if b.data.shape != (dout,):
        raise DimensionError(f"linear: b {b.data.shape} incompatible with w {w.data.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = x2 @ w.data + b.data

    def make_backward(out_t):
        def backward():
            g = out_t.grad.reshape(-1, dout)
            if x.requires_grad:
                _accumulate(x, (g @ w.data.T).reshape(x.data.shape))
            if w.requires_grad:
                _accumulate(w, x2.T @ g)
            if b.requires_grad:
                _accumulate(b, g.sum(axis=0))
        return backward

    return apply_op("linear", (x, w, b), out.reshape(*lead, dout), make_backward)


def _elementwise(op: str, a: Tensor, b, fwd, da, db) -> Tensor:
    """Shared broadcast-aware wrapper for add/sub/mul."""
    if isinstance(b, Tensor):
        _same_dtype(op, a, b)
        b_data = b.data
    else:
        b_data = a.data.dtype.type(b)
    try:
        out = fwd(a.data, b_data)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {np.shape(b_data)}: {exc}") from None

    def make_backward(out_t):
        def backward():
            g = out_t.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(da(g, a.data, b_data), a.data.shape))
            if isinstance(b, Tensor) and b.requires_grad:
                _accumulate(b, _unbroadcast(db(g, a.data, b_data), b.data.shape))
        return backward

    return apply_op(op, (a, b), out, make_backward)


def add(a: Tensor, b) -> Tensor:
    return _elementwise("add", a, b, lambda x, y: x + y,
                        lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _elementwise("sub", a, b, lambda x, y: x - y,
                        lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _elementwise("mul", a, b, lambda x, y: x * y,
                        lambda g, x, y: g * y, lambda g, x, y: g * x)


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    neg = x.data < 0
    out = np.where(neg, x.data * x.data.dtype.type(negative_slope), x.data)

    def make_backward(out_t):
        def backward():
            g = out_t.grad
            _accumulate(x, np.where(neg, g * x.data.dtype.type(negative_slope), g))
        return backward

    return apply_op("leaky_relu", (x,), out, make_backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    out = out.astype(x.data.dtype, copy=False)

    def make_backward(out_t):
        def backward():
            _accumulate(x, out_t.grad * out * (1.0 - out))
        return backward

    return apply_op("sigmoid", (x,), out, make_backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = np.ascontiguousarray(x.data.reshape(shape))

    def make_backward(out_t):
        def backward():
            _accumulate(x, out_t.grad.reshape(x.data.shape))
        return backward

    return apply_op("reshape", (x,), out, make_backward)


def concat_axis(parts: Sequence[Tensor], axis: int) -> Tensor:
    _same_dtype("concat_axis", *parts)
    axis = _norm_axis(axis, parts[0].data.ndim)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat_axis: {[p.data.shape for p in parts]}: {exc}") from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_backward(out_t):
        def backward():
            g = out_t.grad
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _accumulate(p, g[tuple(sl)])
        return backward

    return apply_op("concat_axis", tuple(parts), out, make_backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[...] = x[idx[...]]; backward scatter-adds into the source rows.

    ``idx`` is a plain integer ndarray (it is not differentiated). Out-of-range
    indices indicate an upstream bug and raise IndexError.
    """
    idx = np.asarray(idx)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows (internal error)")
    out = x.data[idx]

    def make_backward(out_t):
        def backward():
            g = np.ascontiguousarray(out_t.grad.reshape(idx.size, -1))
            acc = np.zeros((n, g.shape[1]), dtype=x.data.dtype)
            kernels.scatter_add_rows(acc, idx.reshape(-1).astype(np.int64), g)
            _accumulate(x, acc.reshape(x.data.shape))
        return backward

    return apply_op("gather_rows", (x,), out, make_backward)


# ---------------------------------------------------------------------------
# softmax / reductions
# ---------------------------------------------------------------------------

def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis``; slices there sum to 1."""
    axis = _norm_axis(axis, x.data.ndim)
    _check_finite("softmax_axis(input)", x.data)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def make_backward(out_t):
        def backward():
            g = out_t.grad
            inner = (g * out).sum(axis=axis, keepdims=True)
            _accumulate(x, out * (g - inner))
        return backward

    return apply_op("softmax_axis", (x,), out, make_backward)


def log_softmax_axis(x: Tensor, axis: int) -> Tensor:
    axis = _norm_axis(axis, x.data.ndim)
    _check_finite("log_softmax_axis(input)", x.data)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def make_backward(out_t):
        def backward():
            g = out_t.grad
            _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))
        return backward

    return apply_op("log_softmax_axis", (x,), out, make_backward)


def max_reduce_axis(x: Tensor, axis: int) -> Tensor:
    """Drop ``axis`` keeping per-slice maxima; gradient flows only to the
    argmax entry of each slice, ties broken by lowest index."""
    axis = _norm_axis(axis, x.data.ndim)
    if x.data.shape[axis] < 1:
        raise DimensionError(f"max_reduce_axis: empty axis {axis} in shape {x.data.shape}")
    arg = x.data.argmax(axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def make_backward(out_t):
        def backward():
            g = np.zeros_like(x.data)
            np.put_along_axis(g, np.expand_dims(arg, axis), np.expand_dims(out_t.grad, axis), axis)
            _accumulate(x, g)
        return backward

    return apply_op("max_reduce_axis", (x,), out, make_backward)


def sum_reduce_axis(x: Tensor, axis: int) -> Tensor:
    axis = _norm_axis(axis, x.data.ndim)
    out = x.data.sum(axis=axis)

    def make_backward(out_t):
        def backward():
            _accumulate(x, np.broadcast_to(np.expand_dims(out_t.grad, axis), x.data.shape).copy())
        return backward

    return apply_op("sum_reduce_axis", (x,), out, make_backward)


def mean_reduce_axis(x: Tensor, axis: int) -> Tensor:
    axis = _norm_axis(axis, x.data.ndim)
    n = x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def make_backward(out_t):
        def backward():
            g = np.expand_dims(out_t.grad, axis) / x.data.dtype.type(n)
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        return backward

    return apply_op("mean_reduce_axis", (x,), out, make_backward)


# ---------------------------------------------------------------------------
# batch norm / dropout
# ---------------------------------------------------------------------------

class BatchNorm:
    """Per-channel batch normalization over all axes but the last.

    Learnable scale/shift plus running statistics for eval mode. Running
    stats use biased variance and ``running = momentum * running +
    (1 - momentum) * batch``.
    """

    def __init__(self, num_features: int, dtype=np.float32, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, bn: BatchNorm, train: bool) -> Tensor:
    if x.data.shape[-1] != bn.gamma.data.shape[0]:
        raise DimensionError(f"batch_norm: {x.data.shape[-1]} channels vs {bn.gamma.data.shape[0]} features")
    dt = x.data.dtype
    axes = tuple(range(x.data.ndim - 1))
    x2 = x.data.reshape(-1, x.data.shape[-1])
    n = x2.shape[0]
    if train:
        mean = x2.mean(axis=0)
        var = x2.var(axis=0)
        bn.running_mean = (bn.momentum * bn.running_mean.astype(dt) + (1 - bn.momentum) * mean).astype(dt)
        bn.running_var = (bn.momentum * bn.running_var.astype(dt) + (1 - bn.momentum) * var).astype(dt)
    else:
        mean = bn.running_mean.astype(dt)
        var = bn.running_var.astype(dt)
    inv_std = 1.0 / np.sqrt(var + dt.type(bn.eps))
    xhat = (x.data - mean) * inv_std
    out = bn.gamma.data * xhat + bn.beta.data

    def make_backward(out_t):
        def backward():
            g = out_t.grad
            if bn.gamma.requires_grad:
                _accumulate(bn.gamma, (g * xhat).sum(axis=axes))
            if bn.beta.requires_grad:
                _accumulate(bn.beta, g.sum(axis=axes))
            if x.requires_grad:
                dxhat = g * bn.gamma.data
                if train:
                    d2 = dxhat.reshape(-1, x2.shape[1])
                    xh2 = xhat.reshape(-1, x2.shape[1])
                    dx = (inv_std / n) * (n * d2 - d2.sum(axis=0) - xh2 * (d2 * xh2).sum(axis=0))
                    _accumulate(x, dx.reshape(x.data.shape))
                else:
                    _accumulate(x, dxhat * inv_std)
        return backward

    return apply_op("batch_norm", (x, bn.gamma, bn.beta), out, make_backward)


def dropout(x: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.data.shape) >= rate)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.data.dtype) * scale
    out = x.data * mask

    def make_backward(out_t):
        def backward():
            _accumulate(x, out_t.grad * mask)
        return backward

    return apply_op("dropout", (x,), out, make_backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows. labels: int array (R,)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.data.shape} vs labels {labels.shape}")
    r = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out = np.asarray(-logp[np.arange(r), labels].mean(), dtype=logits.data.dtype)

    def make_backward(out_t):
        def backward():
            g = out_t.grad.reshape(())
            soft = np.exp(logp)
            soft[np.arange(r), labels] -= 1.0
            _accumulate(logits, (g / logits.data.dtype.type(r)) * soft)
        return backward

    return apply_op("cross_entropy", (logits,), out, make_backward)

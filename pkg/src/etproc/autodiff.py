"""Minimal reverse-mode automatic differentiation on dense float64 tensors.

A Tape records primitive applications; backward() replays the tape in
reverse to accumulate vector-Jacobian products. Tapes are meant to be
re-created per training step (dynamic tape). Single-threaded per tape.
"""

from __future__ import annotations

import numpy as np
from scipy import special


class ShapeMismatchError(ValueError):
    pass


class Tape:
    """Ordered record of primitive applications plus the leaf registry."""

    def __init__(self):
        self._records = []  # (out_id, [(parent_id, vjp_fn), ...])
        self._leaf_shapes = {}  # node_id -> shape
        self._next_id = 0

    def _new_id(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, data) -> "Tensor":
        arr = np.array(data, dtype=np.float64)
        nid = self._new_id()
        self._leaf_shapes[nid] = arr.shape
        return Tensor(arr, tape=self, node_id=nid)

    def _record(self, data, parents) -> "Tensor":
        nid = self._new_id()
        self._records.append((nid, parents))
        return Tensor(data, tape=self, node_id=nid)


class Tensor:
    """Dense float64 array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.node_id is not None})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands live on different tapes")
            tape = t.tape
    return tape


def _emit(data, parent_tensors, vjps):
    """Record an op result; skip recording when nothing is tracked."""
    tape = _tape_of(*parent_tensors)
    if tape is None:
        return Tensor(data)
    parents = [
        (t.node_id, vjp)
        for t, vjp in zip(parent_tensors, vjps)
        if t.node_id is not None
    ]
    return tape._record(data, parents)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _emit(out, (a, b), (lambda g, b=b: g @ b.data.T, lambda g, a=a: a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected 2-D, got {a.shape}")
    return _emit(a.data.T.copy(), (a,), (lambda g: g.T,))


def _binary_shapes_ok(a, b):
    # same shape, or row-wise bias: (N, D) op (D,)
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return "bias"
    return None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mode = _binary_shapes_ok(a, b)
    if mode is None:
        raise ShapeMismatchError(f"add: {a.shape} + {b.shape}")
    out = a.data + b.data
    vjp_b = (lambda g: g) if mode == "same" else (lambda g: g.sum(axis=0))
    return _emit(out, (a, b), (lambda g: g, vjp_b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mode = _binary_shapes_ok(a, b)
    if mode is None:
        raise ShapeMismatchError(f"sub: {a.shape} - {b.shape}")
    out = a.data - b.data
    vjp_b = (lambda g: -g) if mode == "same" else (lambda g: -g.sum(axis=0))
    return _emit(out, (a, b), (lambda g: g, vjp_b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"elementwise-mul: {a.shape} * {b.shape}")
    out = a.data * b.data
    return _emit(out, (a, b), (lambda g, b=b: g * b.data, lambda g, a=a: g * a.data))


def scale(c: float, a) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(c * a.data, (a,), (lambda g: c * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _emit(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), (lambda g: g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input")
    return _emit(np.log(a.data), (a,), (lambda g: g / a.data,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _emit(out, (a,), (lambda g: -g * out * out,))


def clip_upper(a, hi: float) -> Tensor:
    """min(a, hi) elementwise; gradient blocked where clipped."""
    a = as_tensor(a)
    mask = a.data < hi
    return _emit(np.where(mask, a.data, hi), (a,), (lambda g: g * mask,))


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"softmax-rows: expected 2-D, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot)

    return _emit(out, (a,), (vjp,))


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.array(a.data.sum()), (a,), (lambda g: np.full(a.shape, float(g)),))


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _emit(np.array(a.data.mean()), (a,), (lambda g: np.full(a.shape, float(g) / n),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    vjps = []
    for i in range(len(tensors)):
        lo, hi = offsets[i], offsets[i + 1]
        if axis == 0:
            vjps.append(lambda g, lo=lo, hi=hi: g[lo:hi])
        else:
            vjps.append(lambda g, lo=lo, hi=hi: g[..., lo:hi])
    return _emit(out, tuple(tensors), tuple(vjps))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("lgamma: input must be positive")
    return _emit(special.gammaln(a.data), (a,), (lambda g: g * special.psi(a.data),))


def digamma(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("digamma: input must be positive")
    return _emit(special.psi(a.data), (a,), (lambda g: g * special.polygamma(1, a.data),))


_PRIMITIVES = {
    "matmul": lambda ops: matmul(*ops),
    "add": lambda ops: add(*ops),
    "sub": lambda ops: sub(*ops),
    "elementwise-mul": lambda ops: mul(*ops),
    "relu": lambda ops: relu(*ops),
    "tanh": lambda ops: tanh(*ops),
    "exp": lambda ops: exp(*ops),
    "log": lambda ops: log(*ops),
    "softmax-rows": lambda ops: softmax_rows(*ops),
    "sum": lambda ops: tsum(*ops),
    "mean": lambda ops: tmean(*ops),
    "concat": lambda ops: concat(ops, axis=0),
    "broadcast-scale": lambda ops: scale(float(ops[0].data), ops[1]),
}


def apply_primitive(kind: str, operands) -> Tensor:
    """Dispatch by primitive name; operands is a list of Tensors."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind: {kind}")
    return _PRIMITIVES[kind](list(operands))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> dict:
    """Gradients of a scalar loss w.r.t. every node on its tape.

    Returns a map node-id -> gradient array. Leaves that did not
    influence the loss get zeros.
    """
    if loss.tape is None or loss.node_id is None:
        raise ValueError("backward: loss is not on a tape")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    adjoints = {loss.node_id: np.ones_like(loss.data)}
    for out_id, parents in reversed(tape._records):
        g = adjoints.get(out_id)
        if g is None:
            continue
        for pid, vjp in parents:
            contrib = vjp(g)
            if pid in adjoints:
                adjoints[pid] = adjoints[pid] + contrib
            else:
                adjoints[pid] = np.asarray(contrib, dtype=np.float64)
    for nid, shape in tape._leaf_shapes.items():
        if nid not in adjoints:
            adjoints[nid] = np.zeros(shape)
    return adjoints


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    def __init__(self):
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in place on a dict of parameter arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ShapeMismatchError(f"adam_step: '{name}' {p.shape} vs grad {g.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state

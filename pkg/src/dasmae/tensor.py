"""Dense tensors with reverse-mode automatic differentiation.

Every operation that sees a gradient-requiring input records a node on the
active tape (execution order is a topological order by construction).
``backward`` walks the tape once in reverse and accumulates gradients into
leaf tensors; calling it again without ``zero_grad`` keeps accumulating.

Parameters and activations default to float32. Ops preserve the dtype of
their inputs, so a graph built from float64 leaves runs entirely in double
precision — that is how the finite-difference checks are run.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, InputError, ShapeError

DEFAULT_DTYPE = np.float32

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """A dense n-d array, optionally participating in the gradient tape.

    ``grad`` is allocated (as zeros) only for leaf tensors created with
    ``requires_grad=True``; tensors produced by ops propagate gradients
    through the tape without storing them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_produced")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._produced = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed ops: (output, inputs, vjp) triples."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list = []

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.nodes.append((out, inputs, vjp))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    """Drop all recorded nodes (call between training steps)."""
    _TAPE.clear()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-only forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    track = _GRAD_ENABLED and any(t.requires_grad or t._produced for t in inputs)
    out.requires_grad = track
    out._produced = track
    if track:
        _TAPE.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a plain Python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,))
    b = _as_tensor(b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``(..., m, k) @ (k, n)`` (shared 2-D right operand) and
    stacked ``(..., m, k) @ (..., k, n)`` with identical leading dims.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")

    if bd.ndim == 2:
        def vjp(g):
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _make(ad @ bd, (a, b), vjp)

    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {ad.shape} @ {bd.shape}")

    def vjp(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _make(ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    inverse = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    a = _as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    full_shape = a.data.shape

    def vjp(g):
        out = np.zeros(full_shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), vjp)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-d tensor; ``idx`` may have any shape.

    Output shape is ``idx.shape + (row_width,)``; the gradient scatter-adds
    duplicate indices.
    """
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-d tensor, got {a.data.shape}")
    rows, width = a.data.shape

    def vjp(g):
        out = np.zeros((rows, width), dtype=g.dtype)
        np.add.at(out, idx.ravel(), g.reshape(-1, width))
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def gather_tokens(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: (B, N, D) with idx (B, K) -> (B, K, D)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(
            f"gather_tokens expects (B, N, D) with idx (B, K), got {a.data.shape} / {idx.shape}")
    batch, n_rows, width = a.data.shape
    flat_idx = (idx + np.arange(batch, dtype=np.int64)[:, None] * n_rows).ravel()

    def vjp(g):
        out = np.zeros((batch * n_rows, width), dtype=g.dtype)
        np.add.at(out, flat_idx, g.reshape(-1, width))
        return (out.reshape(batch, n_rows, width),)

    out_data = a.data.reshape(batch * n_rows, width)[flat_idx]
    return _make(out_data.reshape(batch, idx.shape[1], width), (a,), vjp)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        size = a.data.size
        shape = a.data.shape

        def vjp(g):
            return (np.broadcast_to(g / size, shape).astype(g.dtype, copy=True),)

        return _make(np.mean(a.data, dtype=a.data.dtype), (a,), vjp)

    count = a.data.shape[axis]
    shape = a.data.shape

    def vjp_axis(g):
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape).astype(g.dtype, copy=True),)

    return _make(np.mean(a.data, axis=axis, dtype=a.data.dtype), (a,), vjp_axis)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make(np.sum(a.data, dtype=a.data.dtype), (a,), vjp)


# ---------------------------------------------------------------------------
# Neural-net primitives
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if axis >= a.data.ndim:
        raise ContractError(f"softmax axis {axis} out of range for rank {a.data.ndim}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _make(y, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    width = x.data.shape[-1]
    if gamma.data.shape != (width,) or beta.data.shape != (width,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match normalized width ({width},)")
    mu = np.mean(x.data, axis=-1, keepdims=True, dtype=x.data.dtype)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=x.data.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        dxhat = g * gamma.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True, dtype=g.dtype)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True, dtype=g.dtype)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgamma, dbeta

    return _make(y, (x, gamma, beta), vjp)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_K * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(y.astype(x.dtype, copy=False), (a,), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the label index; gradient (p - onehot)/B."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, M) logits, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, n_classes = logits.data.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise InputError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(batch)
    loss = -np.mean(logp[rows, labels], dtype=logits.data.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / batch,)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into every gradient-requiring leaf.

    Walks the active tape in reverse; each recorded node is visited at most
    once. Leaf gradients accumulate across calls until ``zero_grad``.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    pending: dict[int, np.ndarray] = {}
    seed = np.ones((), dtype=loss.data.dtype)
    if loss._produced:
        pending[id(loss)] = seed
    elif loss.requires_grad:
        loss.grad += seed
        return
    else:
        return

    for out, inputs, vjp in reversed(_TAPE.nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            if inp._produced:
                acc = pending.get(id(inp))
                pending[id(inp)] = gi if acc is None else acc + gi
            elif inp.requires_grad:
                inp.grad += gi.astype(inp.grad.dtype, copy=False)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()

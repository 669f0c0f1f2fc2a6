"""Reverse-mode automatic differentiation over dense numpy tensors.

Small, auditable op set: exactly what a causal transformer with two heads
needs. Every op records its inputs and a backward closure on the implicit
tape (the op graph hanging off the output tensor); ``backward(loss)``
replays it once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, List, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonFinite(AutodiffError):
    pass


class NotScalar(AutodiffError):
    pass


class TapeConsumed(AutodiffError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (eval / generation / benchmarks)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array plus optional gradient.

    Data is immutable by convention after the forward pass that created it;
    only ``grad`` accumulates. Ops built while grad mode is on link results
    back to their inputs for the backward sweep.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        # even a non-leaf with requires_grad False must propagate to its parents
        out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def constant(data, dtype=None) -> Tensor:
    """A tensor that never receives gradient (masks, targets, literals)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    return _result(a.data * s, (a,), lambda g: (g * s,))


def add_array(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a gradient-free array (e.g. an additive attention mask)."""
    return _result(a.data + arr, (a,), lambda g: (g,))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the standard transpose backward rules."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data
    return _result(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over stacked 2-D matrices ([..., m, k] x [..., k, n])."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data
    return _result(
        data,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
    )


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of `table` selected by an integer id array."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _result(data, (table,), bwd)


def select_positions(h: Tensor, indices) -> Tensor:
    """Pick one time step per batch row: [B,T,D] x idx[B] -> [B,D]."""
    idx = np.asarray(indices)
    B, T, _ = h.data.shape
    if np.any(idx < 0) or np.any(idx >= T):
        raise ShapeMismatch(f"pool index out of range for T={T}")
    rows = np.arange(B)
    data = h.data[rows, idx]

    def bwd(g):
        gh = np.zeros_like(h.data)
        gh[rows, idx] = g
        return (gh,)

    return _result(data, (h,), bwd)


def take_per_row(x: Tensor, idx) -> Tensor:
    """Per-row column selection: [N,K] x idx[N] -> [N]."""
    idx = np.asarray(idx)
    N, K = x.data.shape
    if np.any(idx < 0) or np.any(idx >= K):
        raise ShapeMismatch(f"column index out of range for K={K}")
    rows = np.arange(N)
    data = x.data[rows, idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _result(data, (x,), bwd)


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


# ---------------------------------------------------------------------------
# nonlinear ops


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax along the last axis, max-subtracted for stability."""
    if not np.isfinite(x.data).all():
        raise NonFinite("softmax_rows received NaN/Inf input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log-softmax along the last axis (max-subtracted log-sum-exp)."""
    if not np.isfinite(x.data).all():
        raise NonFinite("log_softmax_rows received NaN/Inf input")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatch(f"gain/bias must have shape ({d},)")
    if eps <= 0:
        raise ShapeMismatch("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        gxhat = g * gain.data
        # d xhat / d x folded analytically
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return (gx, ggain, gbias)

    return _result(data, (x, gain, bias), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    sq = x.data * x.data  # x**N with float32 hits a slow pow path in numpy
    u = _GELU_C * (x.data + 0.044715 * sq * x.data)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        dt = (1.0 - t * t) * du
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * dt),)

    return _result(data, (x,), bwd)


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively across multiple uses of a tensor. The
    graph below `loss` is consumed: a second backward raises TapeConsumed.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise TapeConsumed("backward already ran on this graph")

    order: List[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p._backward_fn is not None or p.requires_grad):
                stack.append((p, False))

    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad += g
            continue
        grads = node._backward_fn(g)
        for p, pg in zip(node._parents, grads):
            if pg is None:
                continue
            if p._backward_fn is None and not p.requires_grad:
                continue
            if p._backward_fn is None:
                # leaf parameter: accumulate into .grad
                if p.grad is None:
                    p.grad = np.array(pg, copy=True)
                else:
                    p.grad += pg
            else:
                acc = flowing.get(id(p))
                if acc is None:
                    flowing[id(p)] = np.array(pg, copy=True)
                else:
                    acc += pg
        node._backward_fn = None
        node._parents = ()
    loss._consumed = True

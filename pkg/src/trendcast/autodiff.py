"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tensor wraps a numpy array and remembers how it was produced; calling
``backward()`` on a scalar loss walks the recorded graph in reverse
topological order and accumulates gradients into every ``requires_grad``
leaf. The recorded graph is the tape: each op closure keeps references to
its inputs and whatever activations its gradient needs, and a fresh tape
is built on every forward pass.

Only the shapes the forecasting models actually use are supported. There
is no broadcasting except for explicit bias adds (`add_bias`) and column
scaling (`colscale`); everything else requires exact shape agreement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes for the requested primitive."""


class GraphError(RuntimeError):
    """backward() called on a non-scalar node or a detached graph."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, _parents=()):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None
        self._parents = tuple(_parents)
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def backward(self):
        backward(self)

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values, parents):
    out = Tensor(values, requires_grad=any(p.requires_grad for p in parents),
                 _parents=parents)
    return out


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must hold a single value. Traversal is iterative; recurrent
    graphs easily exceed Python's recursion limit.
    """
    if loss.values.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any requires_grad tensor")

    # iterative post-order topological sort
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.values))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def _require_same_shape(a, b, op):
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.values.shape} and {b.values.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "add")
    out = _node(a.values + b.values, (a, b))

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)
    out._backward = _bw
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "sub")
    out = _node(a.values - b.values, (a, b))

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)
    out._backward = _bw
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "mul")
    out = _node(a.values * b.values, (a, b))

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g * b.values)
        if b.requires_grad:
            b._accumulate(g * a.values)
    out._backward = _bw
    return out


def scale(x, c: float):
    x = _as_tensor(x)
    c = float(c)
    out = _node(x.values * c, (x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * c)
    out._backward = _bw
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim not in (1, 2):
        raise ShapeMismatchError(f"matmul: got ndim {a.values.ndim} @ {b.values.ndim}")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims {a.values.shape} @ {b.values.shape}")
    out = _node(a.values @ b.values, (a, b))

    def _bw(g):
        if b.values.ndim == 1:
            if a.requires_grad:
                a._accumulate(np.outer(g, b.values))
            if b.requires_grad:
                b._accumulate(a.values.T @ g)
        else:
            if a.requires_grad:
                a._accumulate(g @ b.values.T)
            if b.requires_grad:
                b._accumulate(a.values.T @ g)
    out._backward = _bw
    return out


def add_bias(x, b, axis: int):
    """Add a 1-D bias along the given axis of a 2-D tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.values.ndim != 2 or b.values.ndim != 1:
        raise ShapeMismatchError("add_bias: expects 2-D input and 1-D bias")
    if x.values.shape[axis] != b.values.shape[0]:
        raise ShapeMismatchError(
            f"add_bias: axis {axis} of {x.values.shape} vs bias {b.values.shape}")
    bcast = b.values[:, None] if axis == 0 else b.values[None, :]
    out = _node(x.values + bcast, (x, b))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=1 - axis))
    out._backward = _bw
    return out


def colscale(x, s):
    """Scale each column of a 2-D tensor by the matching entry of a row vector.

    ``s`` has shape (1, B) or (B,); output is x * s broadcast over rows.
    """
    x, s = _as_tensor(x), _as_tensor(s)
    srow = s.values.reshape(1, -1)
    if x.values.ndim != 2 or srow.shape[1] != x.values.shape[1]:
        raise ShapeMismatchError(f"colscale: {x.values.shape} vs {s.values.shape}")
    out = _node(x.values * srow, (x, s))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * srow)
        if s.requires_grad:
            s._accumulate((g * x.values).sum(axis=0).reshape(s.values.shape))
    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def concat(parts, axis: int = 0):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("concat: empty part list")
    out = _node(np.concatenate([p.values for p in parts], axis=axis), tuple(parts))
    sizes = [p.values.shape[axis] for p in parts]

    def _bw(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                p._accumulate(g[tuple(idx)])
            offset += size
    out._backward = _bw
    return out


def narrow(x, axis: int, start: int, length: int):
    """Contiguous slice along one axis."""
    x = _as_tensor(x)
    idx = [slice(None)] * x.values.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _node(x.values[idx], (x,))

    def _bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.values)
            full[idx] = g
            x._accumulate(full)
    out._backward = _bw
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    out = _node(x.values.reshape(shape), (x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.values.shape))
    out._backward = _bw
    return out


def transpose(x):
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeMismatchError("transpose: expects 2-D")
    out = _node(x.values.T, (x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g.T)
    out._backward = _bw
    return out


def total_sum(x):
    x = _as_tensor(x)
    out = _node(np.sum(x.values), (x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.values, float(g)))
    out._backward = _bw
    return out


def mean_all(x):
    return scale(total_sum(x), 1.0 / x.values.size)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = _as_tensor(x)
    v = x.values
    e = np.exp(-np.abs(v))  # never overflows
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _node(s, (x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))
    out._backward = _bw
    return out


def tanh(x):
    x = _as_tensor(x)
    t = np.tanh(x.values)
    out = _node(t, (x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - t * t))
    out._backward = _bw
    return out


def relu(x):
    x = _as_tensor(x)
    out = _node(np.maximum(x.values, 0.0), (x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * (x.values > 0.0))
    out._backward = _bw
    return out


def softmax(x, axis: int):
    x = _as_tensor(x)
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = _node(s, (x,))

    def _bw(g):
        if x.requires_grad:
            inner = np.sum(g * s, axis=axis, keepdims=True)
            x._accumulate(s * (g - inner))
    out._backward = _bw
    return out


def layer_norm(x, axis: int, eps: float = 1e-12):
    """Normalize to zero mean, unit variance along ``axis`` (no affine part)."""
    x = _as_tensor(x)
    mu = np.mean(x.values, axis=axis, keepdims=True)
    var = np.mean((x.values - mu) ** 2, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = _node(xhat, (x,))

    def _bw(g):
        if x.requires_grad:
            gm = np.mean(g, axis=axis, keepdims=True)
            gx = np.mean(g * xhat, axis=axis, keepdims=True)
            x._accumulate(inv * (g - gm - xhat * gx))
    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution / pooling / losses
# ---------------------------------------------------------------------------

def conv1d(x, w, b=None, stride: int = 1):
    """1-D valid convolution (cross-correlation) over the time axis.

    x: (in_channels, L); w: (out_channels, in_channels, k); optional bias
    (out_channels,). Output length is floor((L - k)/stride) + 1, no padding.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.values.ndim != 2 or w.values.ndim != 3:
        raise ShapeMismatchError("conv1d: expects x (C, L) and w (O, C, k)")
    cin, length = x.values.shape
    cout, cin_w, k = w.values.shape
    if cin != cin_w:
        raise ShapeMismatchError(f"conv1d: channel mismatch {cin} vs {cin_w}")
    if k > length:
        raise ShapeMismatchError(f"conv1d: kernel {k} longer than input {length}")
    if stride < 1:
        raise ShapeMismatchError("conv1d: stride must be >= 1")
    lout = (length - k) // stride + 1
    # (lout, cin, k) view of the input windows
    windows = np.stack([x.values[:, j * stride:j * stride + k] for j in range(lout)])
    val = np.einsum("ock,jck->oj", w.values, windows)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.values.shape != (cout,):
            raise ShapeMismatchError(f"conv1d: bias shape {b.values.shape} vs ({cout},)")
        val = val + b.values[:, None]
        parents.append(b)
    out = _node(val, tuple(parents))

    def _bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.values)
            patch = np.einsum("oj,ock->jck", g, w.values)
            for j in range(lout):
                gx[:, j * stride:j * stride + k] += patch[j]
            x._accumulate(gx)
        if w.requires_grad:
            w._accumulate(np.einsum("oj,jck->ock", g, windows))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=1))
    out._backward = _bw
    return out


def global_max_pool(x):
    """Max over the time axis of a (C, L) tensor -> (C,)."""
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeMismatchError("global_max_pool: expects 2-D")
    arg = np.argmax(x.values, axis=1)
    out = _node(x.values[np.arange(x.values.shape[0]), arg], (x,))

    def _bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.values)
            gx[np.arange(x.values.shape[0]), arg] = g
            x._accumulate(gx)
    out._backward = _bw
    return out


def mse_loss(pred, target):
    """Mean squared error over all elements; target is treated as constant."""
    pred = _as_tensor(pred)
    tval = target.values if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.values.shape != tval.shape:
        raise ShapeMismatchError(f"mse_loss: {pred.values.shape} vs {tval.shape}")
    diff = pred.values - tval
    out = _node(np.mean(diff ** 2), (pred,))

    def _bw(g):
        if pred.requires_grad:
            pred._accumulate(g * 2.0 * diff / diff.size)
    out._backward = _bw
    return out


def dense(x, W, b=None):
    """Affine map W @ x (+ b). x may be a vector or a column-batched matrix."""
    y = matmul(W, x)
    if b is None:
        return y
    if y.values.ndim == 1:
        return add(y, b)
    return add_bias(y, b, axis=0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments plus shared hyperparameters."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
                     m=[np.zeros_like(p.values) for p in params],
                     v=[np.zeros_like(p.values) for p in params])


def adam_step(params, grads, state: AdamState) -> AdamState:
    """One Adam update with bias correction; mutates params in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError("adam_step: params/grads/state lengths differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.values.shape != g.shape:
            raise ShapeMismatchError(f"adam_step: param {p.values.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** state.t)
        vhat = v / (1.0 - b2 ** state.t)
        p.values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


def zero_grads(params):
    for p in params:
        p.zero_grad()

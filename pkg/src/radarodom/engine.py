"""Dense-array reverse-mode differentiation.

A :class:`Value` wraps a float64 numpy array (rank <= 3) together with the
closure that pushes its gradient back to the Values it was computed from.
Every learnable block in the package is written in terms of the functions
below; gradients are obtained with :func:`backward`.

Gradients are zeroed on entry to each :func:`backward` call, so calling it
twice on the same root returns the same gradients rather than doubling them.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

MAX_RANK = 3

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph (inference, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Value:
    """Node of the computation graph.

    ``grad`` always has the shape of ``data``; storage is allocated lazily and
    reads before any gradient has arrived return zeros.
    """

    __slots__ = ("data", "_grad", "op", "parents", "_backward", "requires_grad", "__weakref__")

    def __init__(self, data, op="const", parents=(), requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(op, arr.shape, detail=f"rank > {MAX_RANK}")
        self.data = arr
        self._grad = None
        self.op = op
        self.parents = parents
        self._backward = None
        self.requires_grad = requires_grad

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise ShapeError("grad", g.shape, self.data.shape)
        self._grad = g

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Value(op={self.op!r}, shape={self.data.shape})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)


def param(data):
    """Leaf Value that collects gradients."""
    return Value(data, op="param", requires_grad=True)


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


def _node(data, op, parents, backward):
    out = Value(data, op=op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.parents = parents
        out.requires_grad = True
        out._backward = backward
    if out.data.ndim > MAX_RANK:
        raise ShapeError(op, out.data.shape, detail=f"rank > {MAX_RANK}")
    return out


def _acc(v, g):
    if not v.requires_grad:
        return
    if v._grad is None:
        v._grad = np.asarray(g, dtype=np.float64)
    else:
        v._grad = v._grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_value(a), as_value(b)
    _check_broadcast("add", a, b)

    def bw():
        _acc(a, _unbroadcast(out._grad, a.shape))
        _acc(b, _unbroadcast(out._grad, b.shape))

    out = _node(a.data + b.data, "add", (a, b), bw)
    return out


def sub(a, b):
    a, b = as_value(a), as_value(b)
    _check_broadcast("sub", a, b)

    def bw():
        _acc(a, _unbroadcast(out._grad, a.shape))
        _acc(b, _unbroadcast(-out._grad, b.shape))

    out = _node(a.data - b.data, "sub", (a, b), bw)
    return out


def mul(a, b):
    a, b = as_value(a), as_value(b)
    _check_broadcast("mul", a, b)

    def bw():
        g = out._grad
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    out = _node(a.data * b.data, "mul", (a, b), bw)
    return out


def div(a, b):
    a, b = as_value(a), as_value(b)
    _check_broadcast("div", a, b)
    res = a.data / b.data

    def bw():
        g = out._grad
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * res / b.data, b.shape))

    out = _node(res, "div", (a, b), bw)
    return out


def neg(a):
    a = as_value(a)

    def bw():
        _acc(a, -out._grad)

    out = _node(-a.data, "neg", (a,), bw)
    return out


def reciprocal(a):
    a = as_value(a)
    res = 1.0 / a.data

    def bw():
        _acc(a, -out._grad * res * res)

    out = _node(res, "reciprocal", (a,), bw)
    return out


def square(a):
    a = as_value(a)

    def bw():
        _acc(a, 2.0 * a.data * out._grad)

    out = _node(a.data * a.data, "square", (a,), bw)
    return out


def sqrt(a):
    a = as_value(a)
    res = np.sqrt(a.data)

    def bw():
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(res > 0, 0.5 * out._grad / np.where(res > 0, res, 1.0), 0.0)
        _acc(a, g)

    out = _node(res, "sqrt", (a,), bw)
    return out


def exp(a):
    a = as_value(a)
    res = np.exp(a.data)

    def bw():
        _acc(a, out._grad * res)

    out = _node(res, "exp", (a,), bw)
    return out


def log(a):
    a = as_value(a)

    def bw():
        _acc(a, out._grad / a.data)

    out = _node(np.log(a.data), "log", (a,), bw)
    return out


def sigmoid(a):
    a = as_value(a)
    res = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw():
        _acc(a, out._grad * res * (1.0 - res))

    out = _node(res, "sigmoid", (a,), bw)
    return out


def tanh(a):
    a = as_value(a)
    res = np.tanh(a.data)

    def bw():
        _acc(a, out._grad * (1.0 - res * res))

    out = _node(res, "tanh", (a,), bw)
    return out


def relu(a):
    a = as_value(a)
    mask = a.data > 0

    def bw():
        _acc(a, out._grad * mask)

    out = _node(a.data * mask, "relu", (a,), bw)
    return out


def silu(a):
    a = as_value(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw():
        _acc(a, out._grad * (s * (1.0 + a.data * (1.0 - s))))

    out = _node(a.data * s, "silu", (a,), bw)
    return out


def clamp_min(a, lo):
    """max(a, lo) for a constant floor; gradient passes where a > lo."""
    a = as_value(a)
    mask = a.data > lo

    def bw():
        _acc(a, out._grad * mask)

    out = _node(np.where(mask, a.data, lo), "clamp_min", (a,), bw)
    return out


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_value(a)
    ax = _norm_axis(axis, a.ndim)

    def bw():
        g = out._grad
        if not keepdims and ax is not None:
            g = np.expand_dims(g, ax)
        _acc(a, np.broadcast_to(g, a.shape))

    out = _node(a.data.sum(axis=ax, keepdims=keepdims), "sum", (a,), bw)
    return out


def mean(a, axis=None, keepdims=False):
    a = as_value(a)
    ax = _norm_axis(axis, a.ndim)
    n = a.data.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    return mul(sum(a, axis=ax, keepdims=keepdims), 1.0 / n)


def max(a, axis, keepdims=False):  # noqa: A001 - mirrors numpy
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_value(a)
    ax = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    res = np.take_along_axis(a.data, idx, axis=ax)

    def bw():
        g = out._grad
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=ax)
        _acc(a, full)

    out = _node(res if keepdims else np.squeeze(res, axis=ax), "max", (a,), bw)
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        res = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw():
        g = out._grad
        if a.requires_grad:
            _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _acc(b, gb)

    out = _node(res, "matmul", (a, b), bw)
    return out


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    a = as_value(a)
    try:
        res = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def bw():
        _acc(a, out._grad.reshape(a.shape))

    out = _node(res, "reshape", (a,), bw)
    return out


def transpose(a, axes=None):
    a = as_value(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)

    def bw():
        _acc(a, np.transpose(out._grad, inv))

    out = _node(np.transpose(a.data, axes), "transpose", (a,), bw)
    return out


def flip(a, axis):
    """Reverse the order of entries along ``axis``."""
    a = as_value(a)

    def bw():
        _acc(a, np.flip(out._grad, axis=axis))

    out = _node(np.flip(a.data, axis=axis).copy(), "flip", (a,), bw)
    return out


def concat(values, axis=0):
    vals = [as_value(v) for v in values]
    try:
        res = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[v.shape for v in vals]) from None
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw():
        for v, g in zip(vals, np.split(out._grad, sizes, axis=axis)):
            _acc(v, g)

    out = _node(res, "concat", tuple(vals), bw)
    return out


def getitem(a, key):
    """Basic (slice/int) indexing."""
    a = as_value(a)
    res = a.data[key]

    def bw():
        full = np.zeros_like(a.data)
        full[key] = out._grad
        _acc(a, full)

    out = _node(np.array(res, copy=True), "getitem", (a,), bw)
    return out


def _scatter_rows(idx, g, shape):
    """Sum rows of ``g`` (indexed by ``idx``) into a zero array of ``shape``."""
    n = shape[0]
    width = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    rows = idx.reshape(-1) % n
    flat = (rows[:, None] * width + np.arange(width)[None, :]).reshape(-1)
    out = np.bincount(flat, weights=g.reshape(-1), minlength=n * width)
    return out.reshape(shape)


def gather(a, idx):
    """Rows of ``a`` selected by an integer array: ``a[idx]``.

    The backward pass scatter-adds into the selected rows, which for a
    permutation is exactly the inverse permutation.
    """
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError("gather", a.shape, idx.shape, detail="index out of range")
    res = a.data[idx]

    def bw():
        _acc(a, _scatter_rows(idx, out._grad, a.shape))

    out = _node(res, "gather", (a,), bw)
    return out


# ---------------------------------------------------------------- fused ops


def softmax(a, axis=-1):
    a = as_value(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    res = e / e.sum(axis=axis, keepdims=True)

    def bw():
        g = out._grad
        _acc(a, res * (g - (g * res).sum(axis=axis, keepdims=True)))

    out = _node(res, "softmax", (a,), bw)
    return out


def layer_norm(a, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis, then apply the optional affine map."""
    a = as_value(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [a]
    res = xhat
    if gamma is not None:
        gamma = as_value(gamma)
        parents.append(gamma)
        res = res * gamma.data
    if beta is not None:
        beta = as_value(beta)
        parents.append(beta)
        res = res + beta.data

    def bw():
        g = out._grad
        if gamma is not None:
            _acc(gamma, _unbroadcast(g * xhat, gamma.shape))
            g = g * gamma.data
        if beta is not None:
            _acc(beta, _unbroadcast(out._grad, beta.shape))
        if a.requires_grad:
            n = a.shape[-1]
            gx = inv / n * (n * g - g.sum(axis=-1, keepdims=True)
                            - xhat * (g * xhat).sum(axis=-1, keepdims=True))
            _acc(a, gx)

    out = _node(res, "layer_norm", tuple(parents), bw)
    return out


def l2norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; the subgradient at the origin is zero."""
    a = as_value(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def bw():
        g = out._grad
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        _acc(a, np.where(n > 0, g * a.data / safe, 0.0))

    out = _node(n if keepdims else np.squeeze(n, axis=axis), "l2norm", (a,), bw)
    return out


# ---------------------------------------------------------------- driver


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root):
    """Fill ``.grad`` of every Value reachable from the scalar ``root``.

    Gradients of all reachable nodes are reset first; each node's backward
    closure runs exactly once, in reverse topological order.
    """
    if root.data.size != 1:
        raise ShapeError("backward", root.shape, detail="root must be scalar")
    order = _topo_order(root)
    for node in order:
        node._grad = None
    root._grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward()


def release(root):
    """Drop backward closures reachable from ``root`` so the graph can be freed."""
    for node in _topo_order(root):
        if node.op != "param":
            node._backward = None
            node.parents = ()

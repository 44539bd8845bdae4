"""Minimal reverse-mode autodiff on dense numpy arrays.

A Tensor wraps an ndarray and, when gradient recording is enabled, remembers
the operation that produced it (parents + a vector-Jacobian closure).
`backward(loss)` walks the recorded graph in reverse topological order and
returns a {leaf: gradient} map. Single tape per loss, no higher-order grads.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_CLAMP = 1e-12

# optional per-op finiteness check, enabled in tests
CHECK_FINITE = False

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class GradError(RuntimeError):
    """Violation of the backward-pass contract."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.vjp = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, vjp):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out._backward_done = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjp = None
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g to `shape` by summing broadcast axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting allowed)


def _binary(a, b, fwd, vjp_maker, opname):
    # python scalars adopt the other operand's dtype (no silent float64 upcast)
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not conform") from e
    return _result(data, (a, b), vjp_maker(a, b))


def add(a, b):
    return _binary(
        a, b, np.add,
        lambda a, b: lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add")


def sub(a, b):
    return _binary(
        a, b, np.subtract,
        lambda a, b: lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub")


def mul(a, b):
    return _binary(
        a, b, np.multiply,
        lambda a, b: lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)),
        "mul")


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda a, b: lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        "div")


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim == 2 and a.ndim > 2:
        # N-D activations against a 2-D weight: one flat GEMM beats the
        # batched-matmul path by a wide margin
        k, n = b.shape
        flat = a.data.reshape(-1, k)
        data = (flat @ b.data).reshape(a.shape[:-1] + (n,))

        def vjp(g):
            gf = g.reshape(-1, n)
            ga = (gf @ b.data.T).reshape(a.shape)
            gb = flat.T @ gf
            return ga, gb

        return _result(data, (a, b), vjp)
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops


def _unary(a, data, dfn):
    a = as_tensor(a)
    return _result(data, (a,), lambda g: (g * dfn,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, out)


def log(a):
    """Natural log with input clamped to >= LOG_CLAMP (zero grad below the clamp)."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_CLAMP)
    d = np.where(a.data >= LOG_CLAMP, 1.0 / clamped, 0.0)
    return _unary(a, np.log(clamped), d)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _unary(a, out, 0.5 / out)


def power(a, p):
    a = as_tensor(a)
    return _unary(a, a.data ** p, p * a.data ** (p - 1))


def sin(a):
    a = as_tensor(a)
    return _unary(a, np.sin(a.data), np.cos(a.data))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary(a, out, 1.0 - out * out)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, out, out * (1.0 - out))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a):
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return _unary(a, out, d)


def swish(a):
    """x * sigmoid(x) (SiLU)."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, a.data * s, s * (1.0 + a.data * (1.0 - s)))


def relu(a):
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, 0.0), (a.data > 0).astype(a.dtype))


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient is zero outside the interval."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _unary(a, np.clip(a.data, lo, hi), inside.astype(a.dtype))


# ---------------------------------------------------------------------------
# reductions


def _expand_like(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    return _result(data, (a,), lambda g: (_expand_like(g, a.shape, axis, keepdims).copy(),))


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / data.size
    return _result(
        data, (a,),
        lambda g: (_expand_like(g, a.shape, axis, keepdims) / count,))


def reduce_max(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        full = _expand_like(data, a.shape, axis, keepdims)
        mask = (a.data == full).astype(a.dtype)
        # split gradient evenly among ties
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        counts_full = _expand_like(counts, a.shape, axis, True) if axis is not None else counts
        return (_expand_like(g, a.shape, axis, keepdims) * mask / counts_full,)

    return _result(data, (a,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    src = a.shape
    return _result(data, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    a = as_tensor(a)
    data = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _result(data, (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(tensors), vjp)


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice, type(Ellipsis), type(None)))
               for p in parts)


def getitem(a, idx):
    a = as_tensor(a)
    data = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros(a.shape, dtype=a.dtype)
        if basic:
            # basic indexing never aliases, so plain accumulate is safe
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(data, (a,), vjp)


# ---------------------------------------------------------------------------
# normalizations


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis`."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _result(out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Layer normalization over the last axis, composed from primitives."""
    x = as_tensor(x)
    mu = reduce_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, Tensor(np.asarray(eps, dtype=x.dtype))), -0.5)
    return add(mul(mul(xc, inv), gain), bias)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, leaves=None):
    """Compute d(loss)/d(leaf) for every reachable leaf tensor.

    Returns a dict keyed by Tensor identity. If `leaves` is given, the result
    contains an entry for each of them, zero-filled when unused by the graph.
    Calling backward twice on the same loss tensor is an error.
    """
    if not isinstance(loss, Tensor):
        raise GradError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise GradError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GradError("backward already called on this loss; re-record the graph first")
    loss._backward_done = True

    grads = {id(loss): np.ones_like(loss.data)}
    result = {}
    if loss.requires_grad and not loss.parents:
        result[loss] = grads[id(loss)]
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad:
                continue
            if pg.dtype != p.dtype:
                pg = pg.astype(p.dtype)
            if p.vjp is None:
                # leaf
                if p in result:
                    result[p] = result[p] + pg
                else:
                    result[p] = pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                result[leaf] = np.zeros(leaf.shape, dtype=leaf.dtype)
    return result

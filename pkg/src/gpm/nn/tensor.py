"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape: every operation records its parent tensors together with
vector-Jacobian closures. The closures are themselves written in terms of
tensor operations, so calling :func:`backward` with ``create_graph=True``
yields gradients that can be differentiated again (needed e.g. for
gradient penalties on a discriminator's input gradient).

Everything is float64 and row-major. Supported primitives: elementwise
arithmetic, matrix products, broadcasts/reductions, slicing/concat, and
the activations used by the networks in this package.
"""
from __future__ import annotations

import numpy as np

from gpm.errors import GraphError

_grad_enabled = True


class no_grad:
    """Disable taping inside a with-block (pure evaluation, no graph)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    # Keep numpy from consuming Tensor operands in mixed expressions.
    __array_ufunc__ = None
    __slots__ = ("data", "_parents", "_vjps", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self._parents = ()
        self._vjps = ()
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def leaf(data):
    """A leaf tensor that gradients accumulate into."""
    return Tensor(data, requires_grad=True)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, pairs):
    """Create a graph node from ((parent, vjp), ...) pairs."""
    out = Tensor(data)
    if _grad_enabled:
        kept = [(p, f) for p, f in pairs if p.requires_grad]
        if kept:
            out._parents = tuple(p for p, _ in kept)
            out._vjps = tuple(f for _, f in kept)
            out.requires_grad = True
    return out


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tensor_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.data.shape[i] != 1)
    if axes:
        g = tensor_sum(g, axis=axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


# -- arithmetic ---------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _node(a.data + b.data, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    return _node(a.data - b.data, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(neg(g), b.data.shape)),
    ))


def neg(a):
    a = _wrap(a)
    return _node(-a.data, ((a, lambda g: neg(g)),))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _node(a.data * b.data, (
        (a, lambda g: _unbroadcast(mul(g, b), a.data.shape)),
        (b, lambda g: _unbroadcast(mul(g, a), b.data.shape)),
    ))


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    return _node(a.data / b.data, (
        (a, lambda g: _unbroadcast(div(g, b), a.data.shape)),
        (b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.data.shape)),
    ))


def power(a, p):
    a = _wrap(a)
    if isinstance(p, Tensor):
        raise GraphError("only constant exponents are supported")
    p = float(p)
    return _node(a.data ** p, (
        (a, lambda g: mul(g, mul(power(a, p - 1.0), p))),
    ))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise GraphError("matmul expects 2-D operands")
    return _node(a.data @ b.data, (
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    ))


def transpose(a):
    a = _wrap(a)
    return _node(a.data.T, ((a, lambda g: transpose(g)),))


def reshape(a, shape):
    a = _wrap(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), ((a, lambda g: reshape(g, old)),))


def broadcast_to(a, shape):
    a = _wrap(a)
    old = a.data.shape
    return _node(np.broadcast_to(a.data, shape), ((a, lambda g: _unbroadcast(g, old)),))


def take(a, idx):
    """Basic slicing; the adjoint scatters into a zero tensor."""
    a = _wrap(a)
    old = a.data.shape
    return _node(a.data[idx], ((a, lambda g: _scatter(g, idx, old)),))


def _scatter(g, idx, shape):
    g = _wrap(g)
    buf = np.zeros(shape)
    buf[idx] = g.data
    return _node(buf, ((g, lambda gg: take(gg, idx)),))


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    pairs = []
    offset = 0
    for p in parts:
        width = p.data.shape[axis]
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(offset, offset + width)
        sl = tuple(sl)
        pairs.append((p, lambda g, sl=sl: take(g, sl)))
        offset += width
    return _node(data, tuple(pairs))


# -- reductions ---------------------------------------------------------

def tensor_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def vjp(g):
        gg = g
        if not keepdims:
            if axis is None:
                gg = reshape(gg, (1,) * len(in_shape))
            else:
                axes = axis if isinstance(axis, tuple) else (axis,)
                axes = tuple(ax % len(in_shape) for ax in axes)
                kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
                gg = reshape(gg, kshape)
        return broadcast_to(gg, in_shape)

    return _node(data, ((a, vjp),))


def tensor_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- nonlinearities -----------------------------------------------------

def exp(a):
    a = _wrap(a)
    out = _node(np.exp(a.data), ((a, lambda g: mul(g, out)),))
    return out


def log(a):
    a = _wrap(a)
    return _node(np.log(a.data), ((a, lambda g: div(g, a)),))


def sqrt(a):
    a = _wrap(a)
    out = _node(np.sqrt(a.data), ((a, lambda g: div(g, mul(out, 2.0))),))
    return out


def tanh(a):
    a = _wrap(a)
    out = _node(np.tanh(a.data), (
        (a, lambda g: mul(g, sub(1.0, mul(out, out)))),
    ))
    return out


def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _wrap(a)
    out = _node(_expit(a.data), (
        (a, lambda g: mul(g, mul(out, sub(1.0, out)))),
    ))
    return out


def log_sigmoid(a):
    """log(sigmoid(a)) = -log(1 + exp(-a)), computed without overflow."""
    a = _wrap(a)
    return _node(-np.logaddexp(0.0, -a.data), (
        (a, lambda g: mul(g, sigmoid(neg(a)))),
    ))


def leaky_relu(a, slope):
    a = _wrap(a)
    gate = np.where(a.data >= 0, 1.0, slope)
    return _node(a.data * gate, ((a, lambda g: mul(g, Tensor(gate))),))


def relu(a):
    return leaky_relu(a, 0.0)


def silu(a):
    a = _wrap(a)
    return mul(a, sigmoid(a))


# -- differentiation ----------------------------------------------------

def _toposort(out):
    order = []
    seen = set()
    stack = [(out, iter(out._parents))]
    seen.add(id(out))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order  # parents before children


def backward(out, wrt, grad_out=None, create_graph=False):
    """Gradients of ``out`` with respect to each tensor in ``wrt``.

    ``out`` is typically scalar; for non-scalar outputs pass ``grad_out``.
    With ``create_graph=True`` the returned gradients are differentiable.
    """
    if not isinstance(out, Tensor):
        raise GraphError("backward target is not a Tensor (unsupported primitive?)")
    if grad_out is None:
        grad_out = Tensor(np.ones_like(out.data))
    grads = {id(out): _wrap(grad_out)}
    order = _toposort(out)
    ctx = no_grad() if not create_graph else _nullcontext()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                pg = vjp(g)
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else add(acc, pg)
    return [grads.get(id(w), Tensor(np.zeros_like(w.data))) for w in wrt]


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

The graph is a tape of ``Tensor`` nodes built implicitly as ops execute. Each
recorded node keeps its parent references and a VJP closure; ``backward`` walks
the nodes in reverse topological order and accumulates cotangents.

Two evaluation modes share one set of VJP formulas:

* fast mode (``create_graph=False``): the backward pass runs under ``no_grad``,
  so VJP closures execute as raw numpy and produce plain ndarrays;
* graph mode (``create_graph=True``): the backward pass itself is recorded,
  so the returned gradients are differentiable nodes and a second ``backward``
  through them yields exact second-order gradients (needed for penalties on
  input-gradient norms).

Ops accept any mix of ``Tensor`` and array-likes and dispatch on whether
recording is active: with gradients disabled, or when no input requires a
gradient, they return bare ndarrays with no tape overhead. All data is float64.
``matmul`` requires both operands to have ndim >= 2 (leading batch dims
broadcast); reshape 1-D vectors at the call site.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "input_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "swap_last",
    "sum",
    "mean",
    "reshape",
    "broadcast_to",
    "concat",
    "slice_axis",
    "pad_axis",
    "exp",
    "log",
    "sqrt",
    "square",
    "tanh",
    "sigmoid",
    "softplus",
    "clip",
    "detach",
    "linear",
    "layernorm",
    "mish",
    "simnorm",
    "as_array",
]

_builtin_sum = sum

_GRAD_ENABLED = True


class no_grad(contextlib.ContextDecorator):
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus an optional position in the autodiff graph.

    Leaf tensors are created directly (``requires_grad=True`` marks trainable
    parameters); interior nodes are created by ops and carry a VJP closure.
    Tensor data must not be mutated in place once the tensor participates in a
    graph.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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


def as_array(x):
    """Raw float64 ndarray view of a tensor or array-like."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


_data = as_array


def _shape(x):
    return x.data.shape if isinstance(x, Tensor) else np.shape(x)


def _make(out_data, parents, vjp):
    # Record only when the tape is live and some parent can carry gradient.
    if _GRAD_ENABLED:
        for p in parents:
            if isinstance(p, Tensor) and p.requires_grad:
                t = Tensor(out_data, requires_grad=True)
                t._parents = tuple(parents)
                t._vjp = vjp
                return t
    return out_data


def _sum_to(g, shape):
    """Reduce a cotangent back to the broadcast-source shape."""
    gshape = _shape(g)
    if gshape == tuple(shape):
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = sum(g, axis=tuple(range(extra)))
        gshape = _shape(g)
    axes = tuple(i for i, (gs, s) in enumerate(zip(gshape, shape)) if s == 1 and gs != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b):
    out = _data(a) + _data(b)
    sa, sb = _shape(a), _shape(b)

    def vjp(g):
        return _sum_to(g, sa), _sum_to(g, sb)

    return _make(out, (a, b), vjp)


def sub(a, b):
    out = _data(a) - _data(b)
    sa, sb = _shape(a), _shape(b)

    def vjp(g):
        return _sum_to(g, sa), _sum_to(neg(g), sb)

    return _make(out, (a, b), vjp)


def mul(a, b):
    out = _data(a) * _data(b)
    sa, sb = _shape(a), _shape(b)

    def vjp(g):
        return _sum_to(mul(g, b), sa), _sum_to(mul(g, a), sb)

    return _make(out, (a, b), vjp)


def div(a, b):
    out = _data(a) / _data(b)
    sa, sb = _shape(a), _shape(b)

    def vjp(g):
        da = _sum_to(div(g, b), sa)
        db = _sum_to(neg(div(mul(g, a), mul(b, b))), sb)
        return da, db

    return _make(out, (a, b), vjp)


def neg(a):
    out = -_data(a)

    def vjp(g):
        return (neg(g),)

    return _make(out, (a,), vjp)


def matmul(a, b):
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul requires ndim >= 2 operands, got {ad.ndim} and {bd.ndim}")
    out = np.matmul(ad, bd)
    sa, sb = ad.shape, bd.shape

    def vjp(g):
        da = _sum_to(matmul(g, swap_last(b)), sa)
        db = _sum_to(matmul(swap_last(a), g), sb)
        return da, db

    return _make(out, (a, b), vjp)


def swap_last(a):
    out = np.swapaxes(_data(a), -1, -2)

    def vjp(g):
        return (swap_last(g),)

    return _make(out, (a,), vjp)


def sum(a, axis=None, keepdims=False):
    ad = _data(a)
    src_shape = ad.shape

    if axis is None:
        out = np.sum(ad, axis=None, keepdims=keepdims)
        kept = (1,) * ad.ndim
    else:
        # explicit-axis np.sum delegates to add.reduce; call it directly
        out = np.add.reduce(ad, axis=axis, keepdims=keepdims)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % ad.ndim for ax in axes)
        kept = tuple(1 if i in axes else s for i, s in enumerate(src_shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src_shape),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    ad_shape = _shape(a)
    if axis is None:
        n = int(np.prod(ad_shape)) if ad_shape else 1
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([ad_shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    ad = _data(a)
    out = ad.reshape(shape)
    src = ad.shape

    def vjp(g):
        return (reshape(g, src),)

    return _make(out, (a,), vjp)


def broadcast_to(a, shape):
    out = np.broadcast_to(_data(a), shape)
    src = _shape(a)

    def vjp(g):
        return (_sum_to(g, src),)

    return _make(out, (a,), vjp)


def concat(parts, axis=-1):
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    ax = axis % out.ndim
    sizes = [d.shape[ax] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            slice_axis(g, int(offsets[i]), int(offsets[i + 1]), axis=ax)
            for i in range(len(sizes))
        )

    return _make(out, tuple(parts), vjp)


def slice_axis(a, start, stop, axis=-1):
    ad = _data(a)
    ax = axis % ad.ndim
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(ad.ndim))
    out = ad[idx]
    total = ad.shape[ax]

    def vjp(g):
        return (pad_axis(g, start, total - stop, axis=ax),)

    return _make(out, (a,), vjp)


def pad_axis(a, before, after, axis=-1):
    ad = _data(a)
    ax = axis % ad.ndim
    widths = [(0, 0)] * ad.ndim
    widths[ax] = (before, after)
    out = np.pad(ad, widths)
    start, stop = before, before + ad.shape[ax]

    def vjp(g):
        return (slice_axis(g, start, stop, axis=ax),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
#
# VJPs that depend on the op's own output reference the produced node through a
# one-element cell, so graph-mode double-backward differentiates through it.


def exp(a):
    out_data = np.exp(_data(a))
    cell = []

    def vjp(g):
        return (mul(g, cell[0]),)

    t = _make(out_data, (a,), vjp)
    cell.append(t)
    return t


def log(a):
    out = np.log(_data(a))

    def vjp(g):
        return (div(g, a),)

    return _make(out, (a,), vjp)


def sqrt(a):
    out_data = np.sqrt(_data(a))
    cell = []

    def vjp(g):
        return (div(g, mul(2.0, cell[0])),)

    t = _make(out_data, (a,), vjp)
    cell.append(t)
    return t


def square(a):
    return mul(a, a)


def tanh(a):
    out_data = np.tanh(_data(a))
    cell = []

    def vjp(g):
        return (mul(g, sub(1.0, mul(cell[0], cell[0]))),)

    t = _make(out_data, (a,), vjp)
    cell.append(t)
    return t


def sigmoid(a):
    out_data = expit(_data(a))
    cell = []

    def vjp(g):
        y = cell[0]
        return (mul(g, mul(y, sub(1.0, y))),)

    t = _make(out_data, (a,), vjp)
    cell.append(t)
    return t


def softplus(a):
    out = np.logaddexp(0.0, _data(a))

    def vjp(g):
        return (mul(g, sigmoid(a)),)

    return _make(out, (a,), vjp)


def clip(a, lo, hi):
    ad = _data(a)
    out = np.clip(ad, lo, hi)
    # Closed-interval pass-through: gradient flows wherever the input is not
    # strictly outside the box.
    mask = ((ad >= lo) & (ad <= hi)).astype(np.float64)

    def vjp(g):
        return (mul(g, mask),)

    return _make(out, (a,), vjp)


def detach(a):
    if isinstance(a, Tensor):
        return Tensor(a.data)
    return np.asarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# fused layer primitives
#
# One tape node per layer instead of one per arithmetic step. Fast-mode VJPs
# use ndarray internals cached at forward time; graph-mode VJPs rebuild the
# same quantities as tracked ops from the live parents, which keeps
# second-order gradients exact.


def linear(x, w, b):
    """x @ w + b with broadcasting over leading (ensemble) dims of ``w``."""
    xd, wd = _data(x), _data(w)
    if xd.ndim < 2 or wd.ndim < 2:
        raise ValueError("linear requires ndim >= 2 inputs")
    out = np.matmul(xd, wd) + _data(b)
    sx, sw, sb = xd.shape, wd.shape, _shape(b)

    def vjp(g):
        dx = _sum_to(matmul(g, swap_last(w)), sx)
        dw = _sum_to(matmul(swap_last(x), g), sw)
        db = _sum_to(g, sb)
        return dx, dw, db

    return _make(out, (x, w, b), vjp)


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    xd = _data(x)
    n = xd.shape[-1]
    # np.add.reduce + true-divide is what ndarray.mean runs internally; calling
    # it directly skips the wrapper dispatch on this very hot path.
    mu = np.add.reduce(xd, axis=-1, keepdims=True) / n
    xc = xd - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * _data(gain) + _data(bias)
    sg, sb = _shape(gain), _shape(bias)
    sx = xd.shape

    def vjp(g):
        if _GRAD_ENABLED:
            mu_t = mean(x, axis=-1, keepdims=True)
            xc_t = sub(x, mu_t)
            var_t = mean(mul(xc_t, xc_t), axis=-1, keepdims=True)
            inv_t = div(1.0, sqrt(add(var_t, eps)))
            xhat_t = mul(xc_t, inv_t)
            gh = mul(g, gain)
            m1 = mean(gh, axis=-1, keepdims=True)
            m2 = mean(mul(gh, xhat_t), axis=-1, keepdims=True)
            dx = mul(inv_t, sub(sub(gh, m1), mul(xhat_t, m2)))
            dgain = _sum_to(mul(g, xhat_t), sg)
            dbias = _sum_to(g, sb)
            return dx, dgain, dbias
        gd = _data(g)
        gh = gd * _data(gain)
        m1 = np.add.reduce(gh, axis=-1, keepdims=True) / n
        m2 = np.add.reduce(gh * xhat, axis=-1, keepdims=True) / n
        dx = inv * (gh - m1 - xhat * m2)
        dgain = _sum_to(gd * xhat, sg)
        dbias = _sum_to(gd, sb)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), vjp)


def mish(x):
    """x * tanh(softplus(x))."""
    xd = _data(x)
    sp = np.logaddexp(0.0, xd)
    tsp = np.tanh(sp)
    out = xd * tsp

    def vjp(g):
        if _GRAD_ENABLED:
            t = tanh(softplus(x))
            local = add(t, mul(x, mul(sub(1.0, mul(t, t)), sigmoid(x))))
            return (mul(g, local),)
        local = tsp + xd * (1.0 - tsp * tsp) * expit(xd)
        return (_data(g) * local,)

    return _make(out, (x,), vjp)


def simnorm(x, group):
    """Softmax applied independently to contiguous groups of the last axis.

    The output lies on a product of simplices: each group is non-negative and
    sums to one.
    """
    xd = _data(x)
    d = xd.shape[-1]
    if d % group != 0:
        raise ValueError(f"last axis {d} not divisible by group size {group}")
    gshape = xd.shape[:-1] + (d // group, group)
    r = xd.reshape(gshape)
    r = r - r.max(axis=-1, keepdims=True)
    e = np.exp(r)
    y = e / e.sum(axis=-1, keepdims=True)
    out_data = y.reshape(xd.shape)
    cell = []

    def vjp(g):
        if _GRAD_ENABLED:
            gr = reshape(g, gshape)
            yr = reshape(cell[0], gshape)
            s = sum(mul(gr, yr), axis=-1, keepdims=True)
            return (reshape(mul(yr, sub(gr, s)), xd.shape),)
        gr = _data(g).reshape(gshape)
        s = (gr * y).sum(axis=-1, keepdims=True)
        return (((gr - s) * y).reshape(xd.shape),)

    t = _make(out_data, (x,), vjp)
    cell.append(t)
    return t


# ---------------------------------------------------------------------------
# backward


def _topo(root):
    """Reverse-topological node ordering by structural DFS.

    Deterministic for a fixed program: traversal follows parent tuples, never
    container iteration order.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Tensor) and p.requires_grad:
                stack.append((p, False))
    return order


def _accum(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return add(a, b)
    return a + b


def backward(loss, wrt, create_graph=False):
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Returns a list aligned with ``wrt`` (or a single gradient if ``wrt`` is a
    single tensor). Entries are ndarrays in fast mode, graph nodes when
    ``create_graph`` is set. A ``wrt`` entry that does not participate in the
    loss gets None.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor produced by recorded ops")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")

    order = _topo(loss)
    keep = {id(t) for t in targets}
    grads = {id(loss): np.ones_like(loss.data)}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            if node._vjp is None:
                continue
            nid = id(node)
            g = grads.get(nid)
            if nid not in keep:
                grads.pop(nid, None)
            if g is None:
                continue
            pgrads = node._vjp(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                pid = id(p)
                cur = grads.get(pid)
                grads[pid] = pg if cur is None else _accum(cur, pg)

    out = [grads.get(id(t)) for t in targets]
    return out[0] if single else out


def input_gradient(loss, x, create_graph=False):
    """Gradient of ``loss`` with respect to an input tensor ``x`` (leaf or
    interior node).

    With ``create_graph`` the result is itself differentiable, so norms of the
    input gradient can be penalized and differentiated a second time. Raises if
    ``x`` does not participate in the loss.
    """
    g = backward(loss, x, create_graph=create_graph)
    if g is None:
        raise ValueError("input does not participate in the loss graph")
    return g

"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive is evaluated eagerly when it is recorded; the tape keeps
the forward values plus a closure context for the backward pass.  Nodes
support ``+ - * /`` and unary minus so small expressions read naturally::

    tape = Tape()
    x = tape.leaf(np.ones(4))
    loss = (x * x).sum()
    grads = backward(tape, loss)   # {x: 2*x}

Loss kernels live in :mod:`ddir.losses` and register themselves here with
:func:`register_primitive`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonScalarLoss, ShapeError, UnsupportedOp
from .grid import (
    _Stencil,
    identity_coords,
    resample_coords,
    sample_array,
    sample_array_vjp,
    select_by_label,
)

LEAKY_SLOPE = 0.2

_PRIMITIVES = {}


def register_primitive(kind, forward, vjp):
    """``forward(*values, **params) -> (out, ctx)``;
    ``vjp(ctx, g, needs) -> tuple of input gradients (None where not needed)``."""
    _PRIMITIVES[kind] = (forward, vjp)


class Node:
    __slots__ = ("tape", "index", "kind", "value", "grad", "inputs", "ctx", "requires_grad", "name")
    # make ``ndarray + node`` defer to the node's reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, index, kind, value, inputs=(), ctx=None, requires_grad=False, name=None):
        self.tape = tape
        self.index = index
        self.kind = kind
        self.value = value
        self.inputs = inputs
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    def __repr__(self):
        return f"Node({self.index}, {self.kind}, shape={self.shape})"

    @property
    def shape(self):
        return np.shape(self.value)

    def item(self):
        return float(self.value)

    def _rec(self, kind, *others, **params):
        return self.tape.record(kind, self, *others, **params)

    def __add__(self, other):
        return self._rec("add", other)

    def __radd__(self, other):
        return self.tape.record("add", other, self)

    def __sub__(self, other):
        return self._rec("sub", other)

    def __rsub__(self, other):
        return self.tape.record("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self._rec("scale", c=float(other))
        return self._rec("mul", other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise UnsupportedOp("division is only supported by a scalar constant")
        return self._rec("scale", c=1.0 / float(other))

    def __neg__(self):
        return self._rec("scale", c=-1.0)

    def sum(self):
        return self._rec("sum")

    def mean(self):
        return self._rec("mean")

    def exp(self):
        return self._rec("exp")

    def log(self):
        return self._rec("log")


class Tape:
    """Ordered record of primitive evaluations."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, value, inputs=(), ctx=None, requires_grad=False, name=None):
        node = Node(self, len(self.nodes), kind, value, inputs, ctx, requires_grad, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None):
        """A differentiable input."""
        return self._push("leaf", np.array(value, dtype=np.float64), requires_grad=True, name=name)

    def constant(self, value, name=None):
        return self._push("const", np.asarray(value, dtype=np.float64), name=name)

    def _wrap(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.constant(x)

    def record(self, kind, *inputs, **params):
        """Evaluate primitive ``kind`` on ``inputs`` and append it to the tape."""
        try:
            forward, _ = _PRIMITIVES[kind]
        except KeyError:
            raise UnsupportedOp(f"no primitive named {kind!r}") from None
        nodes = tuple(self._wrap(x) for x in inputs)
        out, ctx = forward(*(n.value for n in nodes), **params)
        requires = any(n.requires_grad for n in nodes)
        return self._push(kind, out, nodes, ctx, requires)


def backward(tape, loss):
    """Reverse sweep from the scalar ``loss``.

    Returns ``{leaf_node: gradient}`` for every leaf on the tape; leaves the
    loss does not depend on get zeros.  Gradients are also stored on
    ``node.grad``.
    """
    if np.ndim(loss.value) != 0:
        raise NonScalarLoss(f"loss must be scalar, got shape {np.shape(loss.value)}")
    grads = {loss.index: np.ones(())}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None) if node.kind != "leaf" else grads.get(node.index)
        if g is None or node.kind in ("leaf", "const"):
            continue
        needs = tuple(n.requires_grad for n in node.inputs)
        _, vjp = _PRIMITIVES[node.kind]
        in_grads = vjp(node.ctx, g, needs)
        for inp, gi, need in zip(node.inputs, in_grads, needs):
            if not need or gi is None:
                continue
            if inp.index in grads:
                grads[inp.index] = grads[inp.index] + gi
            else:
                grads[inp.index] = gi
    out = {}
    for node in tape.nodes:
        if node.kind == "leaf":
            g = grads.get(node.index)
            node.grad = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64).reshape(node.shape)
            out[node] = node.grad
    return out


def finite_diff_check(f, x0, eps=1e-4, return_grads=False):
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f(tape, x)`` builds a scalar node from leaf ``x``.  Returns the largest
    elementwise relative error with denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x0 = np.array(x0, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(x0)
    analytic = backward(tape, f(tape, x))[x]

    def value(arr):
        t = Tape()
        return float(f(t, t.leaf(arr)).value)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = value(x0)
        flat[i] = orig - eps
        down = value(x0)
        flat[i] = orig
        num_flat[i] = (up - down) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = float((np.abs(analytic - numeric) / denom).max()) if x0.size else 0.0
    if return_grads:
        return err, analytic, numeric
    return err


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shapes(a, b):
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"cannot combine shapes {np.shape(a)} and {np.shape(b)}") from None


def _add_fwd(a, b):
    _binary_shapes(a, b)
    return a + b, (np.shape(a), np.shape(b))


def _add_vjp(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)


def _sub_fwd(a, b):
    _binary_shapes(a, b)
    return a - b, (np.shape(a), np.shape(b))


def _sub_vjp(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)


def _mul_fwd(a, b):
    _binary_shapes(a, b)
    return a * b, (a, b)


def _mul_vjp(ctx, g, needs):
    a, b = ctx
    return (
        _unbroadcast(g * b, np.shape(a)) if needs[0] else None,
        _unbroadcast(g * a, np.shape(b)) if needs[1] else None,
    )


def _scale_fwd(a, c):
    return a * c, c


def _scale_vjp(c, g, needs):
    return (g * c,)


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


def _exp_vjp(out, g, needs):
    return (g * out,)


def _log_fwd(a):
    return np.log(a), a


def _log_vjp(a, g, needs):
    return (g / a,)


def _leaky_fwd(a, slope=LEAKY_SLOPE):
    pos = a > 0
    return np.where(pos, a, slope * a), (pos, slope)


def _leaky_vjp(ctx, g, needs):
    pos, slope = ctx
    return (np.where(pos, g, slope * g),)


def _sum_fwd(a):
    return np.asarray(a.sum()), np.shape(a)


def _sum_vjp(shape, g, needs):
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(a):
    return np.asarray(a.mean()), np.shape(a)


def _mean_vjp(shape, g, needs):
    n = int(np.prod(shape)) if shape else 1
    return (np.full(shape, float(g) / n),)


def _avg_fwd(*xs):
    if not xs:
        raise ShapeError("mean_of needs at least one input")
    return np.asarray(sum(float(x) for x in xs) / len(xs)), len(xs)


def _avg_vjp(n, g, needs):
    return tuple(np.asarray(g / n) for _ in range(n))


def _concat_fwd(*xs):
    return np.concatenate(xs, axis=0), [x.shape[0] for x in xs]


def _concat_vjp(sizes, g, needs):
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=0))


def _select_fwd(*fields, labels):
    labels = np.asarray(labels)
    out, masks = select_by_label(fields, labels)
    return out, masks


def _select_vjp(masks, g, needs):
    return tuple(np.where(m[None], g, 0.0) if need else None for m, need in zip(masks, needs))


# ---------------------------------------------------------------------------
# spatial primitives


def _warp_fwd(img, u):
    if img.shape[1:] != u.shape[1:]:
        raise ShapeError(f"image dims {img.shape[1:]} != displacement dims {u.shape[1:]}")
    coords = identity_coords(u.shape[1:]) + u
    st = _Stencil(img.shape[1:], coords)
    return sample_array(img, coords, stencil=st), (img, coords, st)


def _warp_vjp(ctx, g, needs):
    img, coords, st = ctx
    gi, gc = sample_array_vjp(img, coords, g, need_img=needs[0], need_coords=needs[1], stencil=st)
    return gi, gc


def _resample_fwd(img, out_dims):
    coords = resample_coords(img.shape[1:], out_dims)
    st = _Stencil(img.shape[1:], coords)
    return sample_array(img, coords, stencil=st), (img, coords, st)


def _resample_vjp(ctx, g, needs):
    img, coords, st = ctx
    gi, _ = sample_array_vjp(img, coords, g, need_img=True, need_coords=False, stencil=st)
    return (gi,)


def _im2col(x, k, stride):
    """(C,H,W) -> (C,k,k,Ho,Wo) patches with zero 'same' padding."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # C, H, W, k, k
    win = win[:, ::stride, ::stride]
    return win, xp.shape


def _conv_fwd(x, w, b, stride=1):
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d shapes x{x.shape} w{w.shape} b{b.shape} are inconsistent")
    k = w.shape[2]
    win, padded_shape = _im2col(x, k, stride)
    out = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]
    return out, (x.shape, w, win, padded_shape, stride)


def _conv_vjp(ctx, g, needs):
    x_shape, w, win, padded_shape, stride = ctx
    k = w.shape[2]
    gx = gw = gb = None
    if needs[1]:
        gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))  # O, C, k, k
    if needs[2]:
        gb = g.sum(axis=(1, 2))
    if needs[0]:
        gp = np.zeros(padded_shape)
        ho, wo = g.shape[1:]
        # contribution of each kernel tap is a strided slice of the padded input
        contrib = np.tensordot(w, g, axes=([0], [0]))  # C, k, k, Ho, Wo
        for i in range(k):
            for j in range(k):
                gp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib[:, i, j]
        p = k // 2
        gx = gp[:, p:p + x_shape[1], p:p + x_shape[2]]
    return gx, gw, gb


def _upsample_fwd(x):
    return x.repeat(2, axis=1).repeat(2, axis=2), x.shape


def _upsample_vjp(shape, g, needs):
    c, h, w = shape
    return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)


def _crop_fwd(x, dims):
    sl = (slice(None),) + tuple(slice(0, n) for n in dims)
    return x[sl].copy(), (x.shape, sl)


def _crop_vjp(ctx, g, needs):
    shape, sl = ctx
    out = np.zeros(shape)
    out[sl] = g
    return (out,)


for _kind, _f, _v in [
    ("add", _add_fwd, _add_vjp),
    ("sub", _sub_fwd, _sub_vjp),
    ("mul", _mul_fwd, _mul_vjp),
    ("scale", _scale_fwd, _scale_vjp),
    ("exp", _exp_fwd, _exp_vjp),
    ("log", _log_fwd, _log_vjp),
    ("leaky_relu", _leaky_fwd, _leaky_vjp),
    ("sum", _sum_fwd, _sum_vjp),
    ("mean", _mean_fwd, _mean_vjp),
    ("mean_of", _avg_fwd, _avg_vjp),
    ("concat", _concat_fwd, _concat_vjp),
    ("select", _select_fwd, _select_vjp),
    ("warp", _warp_fwd, _warp_vjp),
    ("resample", _resample_fwd, _resample_vjp),
    ("conv2d", _conv_fwd, _conv_vjp),
    ("upsample", _upsample_fwd, _upsample_vjp),
    ("crop", _crop_fwd, _crop_vjp),
]:
    register_primitive(_kind, _f, _v)


# thin wrappers so call sites read like functions rather than record() strings


def leaky_relu(x, slope=LEAKY_SLOPE):
    return x.tape.record("leaky_relu", x, slope=slope)


def conv2d(x, w, b, stride=1):
    return x.tape.record("conv2d", x, w, b, stride=stride)


def upsample(x):
    return x.tape.record("upsample", x)


def concat(*xs):
    return xs[0].tape.record("concat", *xs)


def warp(img, u):
    """Differentiable ``img(x + u(x))`` for channel-first arrays."""
    tape = img.tape if isinstance(img, Node) else u.tape
    return tape.record("warp", img, u)


def resample(img, out_dims):
    return img.tape.record("resample", img, out_dims=tuple(int(n) for n in out_dims))


def select(fields, labels):
    return fields[0].tape.record("select", *fields, labels=np.asarray(labels))


def mean_of(*xs):
    return xs[0].tape.record("mean_of", *xs)


def crop(x, dims):
    return x.tape.record("crop", x, dims=tuple(dims))

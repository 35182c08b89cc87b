"""Reverse-mode automatic differentiation on dense float64 arrays.

Operations are recorded on a :class:`Tape` (a Wengert list) while one is
active on the current thread.  Every vector-Jacobian rule is itself written in
terms of the recorded operations, so a backward pass run with
``create_graph=True`` is differentiable again.  That is how :func:`hvp`
(reverse-over-reverse) and :func:`jvp` (the double-vjp trick) are built.

Functions passed to :func:`grad` and friends receive a :class:`Tensor` and must
use the operations in this module (or the Tensor operators) on it.  Plain
numpy arrays are treated as constants; with no tape active every operation
falls through to numpy, so the same model code serves for plain evaluation.
"""

import threading

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import NonFiniteValue

__all__ = [
    "Tape", "Tensor", "grad", "value_and_grad", "hvp", "vjp", "jvp",
    "jtj_apply", "jacobian", "value",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "tanh",
    "sigmoid", "relu", "swish", "matmul", "spmm", "sum", "mean", "reshape",
    "transpose", "getitem", "concatenate", "stack", "broadcast_to",
]

_local = threading.local()


def _active():
    stack = getattr(_local, "stack", None)
    if not stack:
        return None
    return stack[-1]


class Tape:
    """Ordered record of operation nodes for one differentiation.

    ``nodes[i].parents`` only ever refer to nodes with a smaller index, so the
    list is a topological order and a reverse sweep is a valid backward pass.
    """

    def __init__(self):
        self.nodes = []
        self.recording = True

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def variable(self, data):
        """Register a leaf holding ``data`` (copied to float64)."""
        t = Tensor(np.array(data, dtype=np.float64), ())
        t.index = len(self.nodes)
        self.nodes.append(t)
        return t


class Tensor:
    """A recorded array value plus the rules to pull cotangents back to its parents."""

    __slots__ = ("value", "parents", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, parents):
        self.value = data
        self.parents = parents
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, index={self.index})"

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)


def value(x):
    """Underlying ndarray of a Tensor, or ``x`` itself as an array."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tracked(*xs):
    tape = _active()
    if tape is None or not tape.recording:
        return None
    for x in xs:
        if isinstance(x, Tensor):
            return tape
    return None


def _record(tape, data, parents):
    t = Tensor(data, tuple((p, fn) for p, fn in parents if isinstance(p, Tensor)))
    t.index = len(tape.nodes)
    tape.nodes.append(t)
    return t


def _unbroadcast(g, shape):
    gshape = value(g).shape
    if gshape == shape:
        return g
    lead = len(gshape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and gshape[i + lead] != 1
    )
    out = sum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    tape = _tracked(a, b)
    if tape is None:
        return out
    return _record(tape, out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ])


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    tape = _tracked(a, b)
    if tape is None:
        return out
    return _record(tape, out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(neg(g), bv.shape)),
    ])


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    tape = _tracked(a, b)
    if tape is None:
        return out
    return _record(tape, out, [
        (a, lambda g: _unbroadcast(mul(g, b), av.shape)),
        (b, lambda g: _unbroadcast(mul(g, a), bv.shape)),
    ])


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    tape = _tracked(a, b)
    if tape is None:
        return out
    return _record(tape, out, [
        (a, lambda g: _unbroadcast(div(g, b), av.shape)),
        (b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), bv.shape)),
    ])


def neg(a):
    out = -value(a)
    tape = _tracked(a)
    if tape is None:
        return out
    return _record(tape, out, [(a, neg)])


def power(a, k):
    """``a**k`` for a constant real exponent ``k``."""
    av = value(a)
    out = av ** k
    tape = _tracked(a)
    if tape is None:
        return out
    if k == 2:
        return _record(tape, out, [(a, lambda g: mul(g, mul(2.0, a)))])
    return _record(tape, out, [(a, lambda g: mul(g, mul(float(k), power(a, k - 1))))])


def exp(a):
    out = np.exp(value(a))
    tape = _tracked(a)
    if tape is None:
        return out
    node = _record(tape, out, [])
    node.parents = ((a, lambda g: mul(g, node)),)
    return node


def log(a):
    out = np.log(value(a))
    tape = _tracked(a)
    if tape is None:
        return out
    return _record(tape, out, [(a, lambda g: div(g, a))])


def sqrt(a):
    out = np.sqrt(value(a))
    tape = _tracked(a)
    if tape is None:
        return out
    node = _record(tape, out, [])
    node.parents = ((a, lambda g: div(mul(g, 0.5), node)),)
    return node


def tanh(a):
    out = np.tanh(value(a))
    tape = _tracked(a)
    if tape is None:
        return out
    node = _record(tape, out, [])
    node.parents = ((a, lambda g: mul(g, sub(1.0, mul(node, node)))),)
    return node


def sigmoid(a):
    out = expit(value(a))
    tape = _tracked(a)
    if tape is None:
        return out
    node = _record(tape, out, [])
    node.parents = ((a, lambda g: mul(g, mul(node, sub(1.0, node)))),)
    return node


def relu(a):
    av = value(a)
    mask = (av > 0).astype(np.float64)
    out = av * mask
    tape = _tracked(a)
    if tape is None:
        return out
    return _record(tape, out, [(a, lambda g: mul(g, mask))])


def swish(a):
    return mul(a, sigmoid(a))


# --------------------------------------------------------------------------
# linear algebra and shape manipulation

def transpose(a):
    out = value(a).T
    tape = _tracked(a)
    if tape is None:
        return out
    return _record(tape, out, [(a, transpose)])


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    tape = _tracked(a)
    if tape is None:
        return out
    return _record(tape, out, [(a, lambda g: reshape(g, av.shape))])


def _matmul2(a, b):
    out = value(a) @ value(b)
    tape = _tracked(a, b)
    if tape is None:
        return out
    return _record(tape, out, [
        (a, lambda g: _matmul2(g, transpose(b))),
        (b, lambda g: _matmul2(transpose(a), g)),
    ])


def matmul(a, b):
    """Matrix product for 1-D and 2-D operands (numpy semantics)."""
    av, bv = value(a), value(b)
    if av.ndim == 2 and bv.ndim == 2:
        return _matmul2(a, b)
    a2 = reshape(a, (1, av.shape[0])) if av.ndim == 1 else a
    b2 = reshape(b, (bv.shape[0], 1)) if bv.ndim == 1 else b
    out = _matmul2(a2, b2)
    if av.ndim == 1 and bv.ndim == 1:
        return reshape(out, ())
    if av.ndim == 1:
        return reshape(out, (bv.shape[1],))
    return reshape(out, (av.shape[0],))


class _Const:
    """Constant linear operator with a cached transpose."""

    __slots__ = ("mat", "_t")

    def __init__(self, mat):
        self.mat = mat
        self._t = None

    @property
    def t(self):
        if self._t is None:
            self._t = _Const(self.mat.T.tocsr() if sp.issparse(self.mat) else self.mat.T)
            self._t._t = self
        return self._t


def spmm(S, x):
    """``S @ x`` for a constant (sparse or dense) matrix ``S``."""
    op = S if isinstance(S, _Const) else _Const(S)
    out = op.mat @ value(x)
    out = np.asarray(out)
    tape = _tracked(x)
    if tape is None:
        return out
    return _record(tape, out, [(x, lambda g: spmm(op.t, g))])


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    tape = _tracked(a)
    if tape is None:
        return out
    if axis is None:
        kshape = (1,) * av.ndim
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % av.ndim for ax in axes)
        kshape = tuple(1 if i in axes else n for i, n in enumerate(av.shape))
    return _record(tape, np.asarray(out), [
        (a, lambda g: broadcast_to(reshape(g, kshape), av.shape)),
    ])


def mean(a, axis=None, keepdims=False):
    av = value(a)
    if axis is None:
        count = av.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([av.shape[ax] for ax in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def broadcast_to(a, shape):
    av = value(a)
    out = np.broadcast_to(av, shape)
    tape = _tracked(a)
    if tape is None:
        return out
    return _record(tape, np.array(out), [(a, lambda g: _unbroadcast(g, av.shape))])


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    tape = _tracked(a)
    if tape is None:
        return out
    return _record(tape, np.array(out), [(a, lambda g: _scatter(g, idx, av.shape))])


def _scatter(g, idx, shape):
    out = np.zeros(shape)
    np.add.at(out, idx, value(g))
    tape = _tracked(g)
    if tape is None:
        return out
    return _record(tape, out, [(g, lambda h: getitem(h, idx))])


def concatenate(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tracked(*xs)
    if tape is None:
        return out
    ndim = out.ndim
    ax = axis % ndim
    parents = []
    start = 0
    for x, v in zip(xs, vals):
        stop = start + v.shape[ax]
        sl = tuple(slice(start, stop) if i == ax else slice(None) for i in range(ndim))
        parents.append((x, lambda g, sl=sl: getitem(g, sl)))
        start = stop
    return _record(tape, out, parents)


def stack(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    tape = _tracked(*xs)
    if tape is None:
        return out
    ax = axis % out.ndim
    parents = []
    for k, x in enumerate(xs):
        sl = tuple(k if i == ax else slice(None) for i in range(out.ndim))
        parents.append((x, lambda g, sl=sl: getitem(g, sl)))
    return _record(tape, out, parents)


# --------------------------------------------------------------------------
# differentiation drivers

def backward(root, wrt, create_graph=False):
    """Pull a unit cotangent from scalar ``root`` back to the tensors ``wrt``.

    Returns one entry per ``wrt`` tensor: a Tensor when ``create_graph`` is set
    and the gradient depends on recorded values, otherwise an ndarray.
    """
    tape = _active()
    if tape is None:
        raise RuntimeError("backward() requires an active Tape")
    if root.value.size != 1:
        raise ValueError("backward() needs a scalar root")
    keep = {t.index for t in wrt}
    grads = {root.index: np.ones_like(root.value)}
    nodes = tape.nodes
    saved = tape.recording
    tape.recording = create_graph
    try:
        for i in range(root.index, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            if i not in keep:
                del grads[i]
            for parent, rule in nodes[i].parents:
                c = rule(g)
                j = parent.index
                prev = grads.get(j)
                grads[j] = c if prev is None else add(prev, c)
    finally:
        tape.recording = saved
    return [grads.get(t.index, np.zeros_like(t.value)) for t in wrt]


def _check(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite {what}")


def _scalar_out(y):
    if isinstance(y, Tensor):
        if y.value.size != 1:
            raise ValueError("function must return a scalar")
        _check(y.value, "function value")
        return True
    _check(np.asarray(y), "function value")
    return False


def value_and_grad(f, w):
    """Return ``(f(w), grad f(w))``; ``f`` maps a Tensor to a scalar."""
    w = np.asarray(w, dtype=np.float64)
    with Tape() as tape:
        x = tape.variable(w)
        y = f(x)
        if not _scalar_out(y):
            return float(np.asarray(y)), np.zeros_like(w)
        (g,) = backward(y, [x])
    g = np.array(value(g), dtype=np.float64)
    _check(g, "gradient")
    return float(y.value), g


def grad(f, w):
    """Gradient of the scalar function ``f`` at ``w``, same shape as ``w``."""
    return value_and_grad(f, w)[1]


def hvp(f, w, v):
    """Hessian-vector product of scalar ``f`` at ``w`` (reverse-over-reverse)."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError("v must have the shape of w")
    with Tape() as tape:
        x = tape.variable(w)
        y = f(x)
        if not _scalar_out(y):
            return np.zeros_like(w)
        (g,) = backward(y, [x], create_graph=True)
        if not isinstance(g, Tensor):
            return np.zeros_like(w)
        _check(g.value, "gradient")
        s = sum(mul(g, v))
        (hv,) = backward(s, [x])
    hv = np.array(value(hv), dtype=np.float64)
    _check(hv, "Hessian-vector product")
    return hv


def vjp(f, w, u):
    """``J(w)^T u`` for a vector-valued ``f``."""
    w = np.asarray(w, dtype=np.float64)
    with Tape() as tape:
        x = tape.variable(w)
        y = f(x)
        if not isinstance(y, Tensor):
            return np.zeros_like(w)
        _check(y.value, "function value")
        (g,) = backward(sum(mul(y, u)), [x])
    g = np.array(value(g), dtype=np.float64)
    _check(g, "vector-Jacobian product")
    return g


def jvp(f, w, v):
    """``J(w) v`` for a vector-valued ``f``, via two reverse sweeps."""
    return jtj_apply(f, w, v, return_jv=True)[0]


def jtj_apply(f, w, v, return_jv=False):
    """``J^T J v`` (and optionally ``J v``) from one recorded forward pass."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    with Tape() as tape:
        x = tape.variable(w)
        y = f(x)
        if not isinstance(y, Tensor):
            yv = np.asarray(y)
            return np.zeros(yv.shape), np.zeros_like(w)
        _check(y.value, "function value")
        u = tape.variable(np.zeros_like(y.value))
        (jtu,) = backward(sum(mul(y, u)), [x], create_graph=True)
        if isinstance(jtu, Tensor):
            (jv,) = backward(sum(mul(jtu, v)), [u])
            jv = np.array(value(jv))
        else:
            jv = np.zeros_like(y.value)
        _check(jv, "Jacobian-vector product")
        if return_jv:
            return jv, None
        (jtjv,) = backward(sum(mul(y, jv)), [x])
    jtjv = np.array(value(jtjv), dtype=np.float64)
    _check(jtjv, "Gauss-Newton product")
    return jv, jtjv


def jacobian(f, w):
    """Dense Jacobian ``d f / d w`` with shape ``f(w).shape + w.shape``."""
    w = np.asarray(w, dtype=np.float64)
    with Tape() as tape:
        x = tape.variable(w)
        y = f(x)
        if not isinstance(y, Tensor):
            return np.zeros(np.shape(y) + w.shape)
        _check(y.value, "function value")
        flat = reshape(y, (-1,))
        rows = []
        for i in range(flat.value.shape[0]):
            (g,) = backward(getitem(flat, i), [x])
            rows.append(np.array(value(g)))
    jac = np.stack(rows).reshape(y.value.shape + w.shape)
    _check(jac, "Jacobian")
    return jac

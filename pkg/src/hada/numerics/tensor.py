"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active, every
operation that touches a tracked tensor is appended to it together with a
closure computing input gradients from the output gradient. :func:`backward`
replays the tape in reverse.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DegenerateInputError, DimensionError, StructuralError
from . import kernels

_TAPES: list["Tape"] = []


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("values", "grad", "node", "name", "requires_grad", "_tape")

    def __init__(self, values, name=None, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.node = None
        self.name = name
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float(self.values)

    def numpy(self):
        return self.values

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather_rows(self, idx)


class _Op:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self.leaves: list[Tensor] = []
        self._next = 0

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def _new_node(self):
        n = self._next
        self._next += 1
        return n

    def node_of(self, t):
        if t._tape is self and t.node is not None:
            return t.node
        if t.requires_grad:
            t._tape = self
            t.node = self._new_node()
            self.leaves.append(t)
            return t.node
        return None

    def record(self, inputs, out_values, rule):
        nodes = [self.node_of(t) for t in inputs]
        out = Tensor(out_values)
        if all(n is None for n in nodes):
            return out
        out._tape = self
        out.node = self._new_node()
        self.ops.append(_Op(nodes, out.node, rule))
        return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(inputs, out_values, rule):
    tape = active_tape()
    if tape is None:
        return Tensor(out_values)
    return tape.record(inputs, out_values, rule)


def backward(tape, loss, params=None):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaves recorded on the tape but not reachable get zero gradients, as do any
    extra tensors passed in ``params`` that never touched the tape.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss._tape is not tape or loss.node is None:
        raise ContractError("loss was not recorded on this tape")
    grads = {loss.node: np.ones_like(loss.values)}
    for op in reversed(tape.ops):
        g = grads.pop(op.output, None)
        if g is None:
            continue
        for node, gi in zip(op.inputs, op.rule(g)):
            if node is None or gi is None:
                continue
            if node in grads:
                grads[node] = grads[node] + gi
            else:
                grads[node] = gi
    for leaf in tape.leaves:
        g = grads.get(leaf.node)
        leaf.grad = np.zeros_like(leaf.values) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    if params is not None:
        for p in params:
            if p._tape is not tape:
                p.grad = np.zeros_like(p.values)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _apply([a, b], a.values + b.values,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _apply([a, b], a.values - b.values,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _apply([a, b], av * bv,
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av / bv
    return _apply([a, b], out,
                  lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    a = as_tensor(a)
    return _apply([a], -a.values, lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.values)
    return _apply([a], out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    av = a.values
    return _apply([a], np.log(av), lambda g: (g / av,))


def absolute(a):
    a = as_tensor(a)
    sign = np.sign(a.values)
    return _apply([a], np.abs(a.values), lambda g: (g * sign,))


def clip(a, lo, hi):
    """Clamp values; gradient flows only where the input was inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return _apply([a], np.clip(a.values, lo, hi), lambda g: (g * inside,))


def sigmoid(a):
    a = as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.values))
    return _apply([a], out, lambda g: (g * out * (1.0 - out),))


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    factor = np.where(x.values >= 0.0, 1.0, slope)
    return _apply([x], x.values * factor, lambda g: (g * factor,))


def elu(x):
    x = as_tensor(x)
    pos = x.values > 0.0
    ex = np.exp(np.minimum(x.values, 0.0))
    out = np.where(pos, x.values, ex - 1.0)
    factor = np.where(pos, 1.0, ex)
    return _apply([x], out, lambda g: (g * factor,))


# -- shape and linear algebra -----------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    return _apply([a, b], av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    a = as_tensor(a)
    return _apply([a], a.values.T, lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _apply([a], a.values.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    return _apply(tensors, out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def gather_rows(a, idx):
    """Select rows (or elements of a vector) by integer index; repeats allowed."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    return _apply([a], a.values[idx], lambda g: (kernels.segment_sum(g, idx, n),))


def diagonal(a):
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.fill_diagonal(out, g)
        return (out,)

    return _apply([a], np.diagonal(a.values).copy(), rule)


def total(a, axis=None):
    """Sum over ``axis`` (all elements when ``None``)."""
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _apply([a], np.asarray(a.values.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.values.sum(axis=axis)
    return _apply([a], out, lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def linear(x, weight, bias=None):
    """Row-wise affine map ``x @ weight.T + bias``."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def dropout(x, p, rng):
    """Inverted dropout; identity when ``rng`` is None or ``p`` is 0."""
    if rng is None or p <= 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return mul(x, keep / (1.0 - p))


# -- normalizations -----------------------------------------------------------

def log_softmax(x, axis=-1):
    x = as_tensor(x)
    xv = x.values
    shifted = xv - xv.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _apply([x], out, lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x):
    """Scale a vector, or each row of a matrix, to unit Euclidean norm."""
    x = as_tensor(x)
    xv = x.values
    norm = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot L2-normalize a zero vector")
    out = xv / norm

    def rule(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _apply([x], out, rule)


def _check_segments(seg, num_segments):
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments) if seg.size else np.zeros(num_segments, int)
    if counts.shape[0] != num_segments or np.any(counts == 0):
        raise StructuralError("every segment must receive at least one entry")
    return seg


def segment_softmax(scores, seg, num_segments=None):
    """Softmax of ``scores`` within groups sharing the same segment id."""
    scores = as_tensor(scores)
    seg = np.asarray(seg, dtype=np.int64)
    if num_segments is None:
        num_segments = int(seg.max()) + 1 if seg.size else 0
    seg = _check_segments(seg, num_segments)
    sv = scores.values
    smax = kernels.segment_max(sv, seg, num_segments)
    e = np.exp(sv - smax[seg])
    denom = kernels.segment_sum(e, seg, num_segments)
    out = e / denom[seg]

    def rule(g):
        dot = kernels.segment_sum(g * out, seg, num_segments)
        return (out * (g - dot[seg]),)

    return _apply([scores], out, rule)


def segment_sum(x, seg, num_segments):
    """Sum rows of ``x`` into ``num_segments`` buckets."""
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    out = kernels.segment_sum(x.values, seg, num_segments)
    return _apply([x], out, lambda g: (g[seg],))

"""A small tape-based reverse-mode differentiator over numpy arrays.

Operations take ``Var`` or plain arrays.  Plain arrays are constants; an
operation records itself on the tape only when at least one input is a
``Var``.  Without a tape the same functions simply compute values, so the
inference code runs unchanged with or without differentiation.
"""
from __future__ import annotations

import numpy as np


class Tape:
    def __init__(self):
        self._ops = []

    def leaf(self, value, name=None):
        return Var(np.asarray(value), self, name)

    def record(self, fn):
        self._ops.append(fn)

    def __len__(self):
        return len(self._ops)

    def backward(self, out, seed=None):
        """Run the reverse sweep from ``out`` (a scalar unless ``seed`` given)."""
        if seed is None:
            if out.value.size != 1:
                raise ValueError("backward from a non-scalar needs a seed")
            seed = np.ones_like(out.value)
        out.grad = np.asarray(seed, dtype=out.value.dtype)
        for fn in reversed(self._ops):
            fn()


class Var:
    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value, tape, name=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Var({self.name or ''}{self.value.shape})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _emit(val, inputs, backward):
    """Wrap ``val``; ``backward(g)`` receives the output gradient."""
    tape = _tape_of(*inputs)
    if tape is None:
        return val
    out = Var(val, tape)

    def run():
        if out.grad is not None:
            backward(out.grad)

    tape.record(run)
    return out


def _send(x, g):
    if isinstance(x, Var):
        x.accumulate(g)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    va, vb = value(a), value(b)

    def bw(g):
        if isinstance(a, Var):
            a.accumulate(_unbroadcast(g, va.shape))
        if isinstance(b, Var):
            b.accumulate(_unbroadcast(g, vb.shape))

    return _emit(va + vb, (a, b), bw)


def mul(a, b):
    """Hadamard product with broadcasting (a constant factor is a rescale)."""
    va, vb = value(a), value(b)

    def bw(g):
        if isinstance(a, Var):
            a.accumulate(_unbroadcast(g * vb, np.shape(va)))
        if isinstance(b, Var):
            b.accumulate(_unbroadcast(g * va, np.shape(vb)))

    return _emit(va * vb, (a, b), bw)


def relu(x):
    vx = value(x)
    mask = vx > 0

    def bw(g):
        x.accumulate(g * mask)

    return _emit(vx * mask, (x,), bw)


def log(x):
    vx = value(x)
    with np.errstate(divide="ignore"):
        out = np.log(vx)

    def bw(g):
        # zero seeds on zero inputs stay zero instead of becoming nan
        x.accumulate(np.divide(g, vx, out=np.zeros_like(g), where=g != 0))

    return _emit(out, (x,), bw)


def softmax(x, axis=-1):
    """Exponentiate and normalize along ``axis`` (max-shifted)."""
    vx = value(x)
    shifted = vx - vx.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x.accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _emit(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b):
    """``a @ b`` where ``b`` is a matrix (leading dims of ``a`` are batch)
    or both operands are at most 2-D."""
    va, vb = value(a), value(b)
    if va.ndim > 2 and vb.ndim == 2:
        lead = va.shape[:-1]
        out = matmul(reshape(a, (-1, va.shape[-1])), b)
        return reshape(out, lead + (vb.shape[-1],))

    def bw(g):
        if isinstance(a, Var):
            ga = g @ vb.T if vb.ndim > 1 else np.multiply.outer(g, vb)
            a.accumulate(ga)
        if isinstance(b, Var):
            gb = np.multiply.outer(va, g) if va.ndim == 1 else va.T @ g
            b.accumulate(gb)

    if va.ndim > 2 or vb.ndim > 2:
        raise ValueError("matmul supports a batched left operand only")
    return _emit(va @ vb, (a, b), bw)


def affine(x, w, b):
    return add(matmul(x, w), b)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    vx = value(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, vx.shape).copy())

    return _emit(vx.sum(axis=axis, keepdims=keepdims), (x,), bw)


def einsum(spec, *ops):
    """General contraction ("outer combination"); repeated indices within an
    operand are not supported."""
    ins, out_spec = spec.replace(" ", "").split("->")
    in_specs = ins.split(",")
    vals = [value(o) for o in ops]
    res = np.einsum(spec, *vals)

    def bw(g):
        for k, op in enumerate(ops):
            if not isinstance(op, Var):
                continue
            others = [s for i, s in enumerate(in_specs) if i != k]
            ovals = [v for i, v in enumerate(vals) if i != k]
            present = set(out_spec).union(*others) if others else set(out_spec)
            target = in_specs[k]
            missing = [c for c in target if c not in present]
            reduced = "".join(c for c in target if c in present)
            gk = np.einsum(",".join([out_spec] + others) + "->" + reduced, g, *ovals)
            if missing:
                gk = np.broadcast_to(
                    np.expand_dims(gk, [target.index(c) for c in missing]),
                    vals[k].shape).copy()
            op.accumulate(gk)

    return _emit(res, ops, bw)


def transpose(x, axes=None):
    vx = value(x)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        x.accumulate(np.transpose(g, inv))

    return _emit(np.transpose(vx, axes), (x,), bw)


def reshape(x, shape):
    vx = value(x)

    def bw(g):
        x.accumulate(g.reshape(vx.shape))

    return _emit(vx.reshape(shape), (x,), bw)


def concat(xs, axis=0):
    vals = [value(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        for x, gi in zip(xs, np.split(g, sizes, axis=axis)):
            _send(x, gi)

    return _emit(np.concatenate(vals, axis=axis), xs, bw)


def getitem(x, idx):
    """Basic (slice) indexing."""
    vx = value(x)

    def bw(g):
        full = np.zeros_like(vx)
        full[idx] += g
        x.accumulate(full)

    return _emit(vx[idx], (x,), bw)


def take(x, rows, axis=0):
    """Gather along ``axis``; repeated rows accumulate in the backward pass."""
    vx = value(x)
    rows = np.asarray(rows)

    def bw(g):
        full = np.zeros_like(vx)
        np.add.at(full, (slice(None),) * axis + (rows,), g)
        x.accumulate(full)

    return _emit(np.take(vx, rows, axis=axis), (x,), bw)


def segment_sum(x, indicator):
    """Sum rows of ``x`` into segments; ``indicator`` is a sparse
    [segments x rows] 0/1 matrix."""
    vx = value(x)
    flat = vx.reshape(vx.shape[0], -1)
    out = np.asarray(indicator @ flat).reshape((indicator.shape[0],) + vx.shape[1:])

    def bw(g):
        gf = g.reshape(g.shape[0], -1)
        x.accumulate(np.asarray(indicator.T @ gf).reshape(vx.shape))

    return _emit(out, (x,), bw)


class Buffer:
    """A row-addressed array written once per row and read many times.

    Gradients of reads accumulate into ``grad``; each write hands its rows'
    gradient back to the written value.  Correct as long as every row is
    written before it is read, which holds for chart filling.
    """

    def __init__(self, shape, dtype, tape=None):
        self.value = np.zeros(shape, dtype=dtype)
        self.tape = tape
        self.grad = np.zeros(shape, dtype=dtype) if tape is not None else None

    def write(self, rows, x):
        self.value[rows] = value(x)
        if self.tape is not None and isinstance(x, Var):
            buf = self

            def run():
                x.accumulate(buf.grad[rows])

            self.tape.record(run)

    def read(self, rows):
        val = self.value[rows]
        if self.tape is None:
            return val
        out = Var(val, self.tape)
        buf = self

        def run():
            if out.grad is not None:
                np.add.at(buf.grad, rows, out.grad)

        self.tape.record(run)
        return out

"""Explicit-tensor restricted LCFRS-2 grammars.

Rule inventory (``M`` is fan-out-1 nonterminals followed by preterminals)::

    S(x) -> A(x)                        s[A]
    1a  A(xy)   -> B(x) C(y)            C1[A, B, C]    A in N1, B, C in M
    2a  A(yxz)  -> B(x) C(y, z)         D1[A, B, C]    A in N1, B in M, C in N2
    1b  A(x, y) -> B(x) C(y)            C2[A, B, C]    A in N2, B, C in M
    2b  A(xy, z) -> B(x) C(y, z)        D2[A, B, C, 0]
    2c  A(yx, z) -> B(x) C(y, z)        D2[A, B, C, 1]
    2d  A(y, xz) -> B(x) C(y, z)        D2[A, B, C, 2]
    2e  A(y, zx) -> B(x) C(y, z)        D2[A, B, C, 3]
    T(w) -> w                           Q[T, w]
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .tree import DiscoTree, Node

# order of the variant axis of D2
D2_VARIANTS = ("2b", "2c", "2d", "2e")

NORM_TOL = 1e-9


class ShapeError(ValueError):
    """Tensor shapes disagree with the declared dimensions."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during a computation."""


class SampleRejected(RuntimeError):
    """Every attempt produced a yield longer than ``max_len``."""


@dataclass(frozen=True)
class GrammarDims:
    m1: int
    m2: int
    p: int
    v: int

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 0 or self.p < 1 or self.v < 1:
            raise ValueError(f"invalid grammar dimensions {self}")

    @property
    def m(self):
        return self.m1 + self.p

    def shapes(self):
        m1, m2, p, v, m = self.m1, self.m2, self.p, self.v, self.m
        return {"s": (m1,), "C1": (m1, m, m), "D1": (m1, m, m2),
                "C2": (m2, m, m), "D2": (m2, m, m2, 4), "Q": (p, v)}


@dataclass(frozen=True)
class ExplicitGrammar:
    dims: GrammarDims
    s: np.ndarray
    C1: np.ndarray
    D1: np.ndarray
    C2: np.ndarray
    D2: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        for name in ("s", "C1", "D1", "C2", "D2", "Q"):
            # a read-only view; no copy for float64 input
            arr = np.asarray(getattr(self, name), dtype=np.float64).view()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def arrays(self):
        return {k: getattr(self, k) for k in ("s", "C1", "D1", "C2", "D2", "Q")}

    def replace(self, **arrays):
        kw = self.arrays()
        kw.update(arrays)
        return ExplicitGrammar(self.dims, **kw)


@dataclass
class Violation:
    rule: str
    index: tuple
    residual: float

    def __str__(self):
        return f"{self.rule} at {self.index}: residual {self.residual:.3g}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return bool(self.violations)

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)


def check_shapes(grammar):
    for name, shape in grammar.dims.shapes().items():
        got = getattr(grammar, name).shape
        if got != shape:
            raise ShapeError(f"{name} has shape {got}, expected {shape}")


def validate(grammar, tol=NORM_TOL):
    """Check nonnegativity and the normalization of every rule family."""
    check_shapes(grammar)
    report = ValidationReport()
    for name, arr in grammar.arrays().items():
        bad = ~np.isfinite(arr)
        for idx in zip(*np.nonzero(bad)):
            report.violations.append(Violation(f"{name} non-finite", idx, math.inf))
        neg = np.isfinite(arr) & (arr < 0)
        for idx in zip(*np.nonzero(neg)):
            report.violations.append(Violation(f"{name} negative", idx, float(-arr[idx])))

    def rows(rule, sums):
        for i, total in enumerate(np.atleast_1d(sums)):
            r = abs(float(total) - 1.0)
            if not r <= tol:
                report.violations.append(Violation(rule, (i,), r))

    rows("start", grammar.s.sum())
    rows("eq1", grammar.C1.sum(axis=(1, 2)) + grammar.D1.sum(axis=(1, 2)))
    if grammar.dims.m2:
        rows("eq2", grammar.C2.sum(axis=(1, 2)) + grammar.D2.sum(axis=(1, 2, 3)))
    rows("emission", grammar.Q.sum(axis=1))
    return report


def normalize_random(dims, seed, alpha=1.0):
    """Random grammar with strictly positive rule probabilities.

    Scores are Gamma(alpha) draws, so each joint row is Dirichlet(alpha);
    small ``alpha`` gives peaked grammars.
    """
    rng = np.random.default_rng(seed)
    sh = dims.shapes()

    def draw(shape):
        return np.maximum(rng.gamma(alpha, size=shape), 1e-12)

    s = draw(sh["s"])
    C1, D1 = draw(sh["C1"]), draw(sh["D1"])
    C2, D2 = draw(sh["C2"]), draw(sh["D2"])
    Q = draw(sh["Q"])
    z1 = C1.sum(axis=(1, 2)) + D1.sum(axis=(1, 2))
    z2 = C2.sum(axis=(1, 2)) + D2.sum(axis=(1, 2, 3))
    return ExplicitGrammar(
        dims,
        s=s / s.sum(),
        C1=C1 / z1[:, None, None],
        D1=D1 / z1[:, None, None],
        C2=C2 / z2[:, None, None],
        D2=D2 / z2[:, None, None, None],
        Q=Q / Q.sum(axis=1, keepdims=True),
    )


def materialize(fg):
    """Rebuild the dense rule tensors from a CPD-factored grammar.

    One matrix product per parent symbol keeps peak memory at the size of
    the output tensors.
    """
    f = fg.numpy() if hasattr(fg, "numpy") else fg
    d = f.dims

    def cpd3(U, V, W):
        out = np.empty((U.shape[0], V.shape[0], W.shape[0]))
        for a in range(U.shape[0]):
            np.matmul(V * U[a], W.T, out=out[a])
        return out

    D2 = np.empty((d.m2, d.m, d.m2, 4))
    for a in range(d.m2):
        for k in range(4):
            D2[a, :, :, k] = (f.V4 * (f.U4[a] * f.P[k])) @ f.W4.T
    g = ExplicitGrammar(d, s=f.s, C1=cpd3(f.U1, f.V1, f.W1), D1=cpd3(f.U2, f.V2, f.W2),
                        C2=cpd3(f.U3, f.V3, f.W3), D2=D2, Q=f.Q)
    check_shapes(g)
    return g


# ---------------------------------------------------------------------------
# sampling


class _TooLong(Exception):
    pass


class _Sampler:
    def __init__(self, g, rng, max_len):
        self.g, self.rng, self.max_len = g, rng, max_len
        d = g.dims
        self.m1, self.m2, self.m = d.m1, d.m2, d.m
        self.cum1 = np.cumsum(np.concatenate(
            [g.C1.reshape(d.m1, -1), g.D1.reshape(d.m1, -1)], axis=1), axis=1)
        if d.m2:
            self.cum2 = np.cumsum(np.concatenate(
                [g.C2.reshape(d.m2, -1), g.D2.reshape(d.m2, -1)], axis=1), axis=1)
        self.cumq = np.cumsum(g.Q, axis=1)
        self.cums = np.cumsum(g.s)

    def _draw(self, cum):
        u = self.rng.random() * cum[-1]
        k = int(np.searchsorted(cum, u, side="right"))
        return min(k, len(cum) - 1)

    def run(self):
        self.nodes = []
        self.words = []
        self.logp = 0.0
        a = self._draw(self.cums)
        self.logp += math.log(self.g.s[a])
        child, blocks = self.expand1(a)
        self.nodes.append(("S", 0, "start", (child,), blocks))
        return len(self.nodes) - 1

    def _add(self, kind, label, rule, children, blocks):
        self.nodes.append((kind, label, rule, children, blocks))
        return len(self.nodes) - 1

    def expand_m(self, b):
        if b < self.m1:
            return self.expand1(b)
        t = b - self.m1
        w = self._draw(self.cumq[t])
        self.logp += math.log(self.g.Q[t, w])
        leaf = len(self.words)
        self.words.append(w)
        if len(self.words) > self.max_len:
            raise _TooLong
        return self._add("P", t, "emit", (), ([leaf],)), ([leaf],)

    def expand1(self, a):
        g, m, m2 = self.g, self.m, self.m2
        k = self._draw(self.cum1[a])
        if k < m * m:
            b, c = divmod(k, m)
            self.logp += math.log(g.C1[a, b, c])
            nb, (x,) = self.expand_m(b)
            nc, (y,) = self.expand_m(c)
            blocks = (x + y,)
            return self._add("N1", a, "1a", (nb, nc), blocks), blocks
        b, c = divmod(k - m * m, m2)
        self.logp += math.log(g.D1[a, b, c])
        nb, (x,) = self.expand_m(b)
        nc, (y, z) = self.expand2(c)
        blocks = (y + x + z,)
        return self._add("N1", a, "2a", (nb, nc), blocks), blocks

    def expand2(self, a):
        g, m, m2 = self.g, self.m, self.m2
        k = self._draw(self.cum2[a])
        if k < m * m:
            b, c = divmod(k, m)
            self.logp += math.log(g.C2[a, b, c])
            nb, (x,) = self.expand_m(b)
            nc, (y,) = self.expand_m(c)
            blocks = (x, y)
            return self._add("N2", a, "1b", (nb, nc), blocks), blocks
        b, rest = divmod(k - m * m, m2 * 4)
        c, d = divmod(rest, 4)
        self.logp += math.log(g.D2[a, b, c, d])
        nb, (x,) = self.expand_m(b)
        nc, (y, z) = self.expand2(c)
        blocks = [(x + y, z), (y + x, z), (y, x + z), (y, z + x)][d]
        return self._add("N2", a, D2_VARIANTS[d], (nb, nc), blocks), blocks


@dataclass(frozen=True)
class Sample:
    sentence: tuple
    tree: DiscoTree
    logprob: float


def sample(grammar, rng, max_len=40, max_attempts=100):
    """Draw a sentence and its derivation top-down.

    Derivations whose yield exceeds ``max_len`` are abandoned and redrawn;
    after ``max_attempts`` failures :class:`SampleRejected` is raised.
    """
    sampler = _Sampler(grammar, rng, max_len)
    for _ in range(max_attempts):
        try:
            root = sampler.run()
        except (_TooLong, RecursionError):
            continue
        return _finish(sampler, root)
    raise SampleRejected(f"no derivation of length <= {max_len} "
                         f"in {max_attempts} attempts")


def _finish(sampler, root):
    (order,) = sampler.nodes[root][4]
    pos = {leaf: i for i, leaf in enumerate(order)}
    sentence = tuple(sampler.words[leaf] for leaf in order)
    nodes = []
    for kind, label, rule, children, blocks in sampler.nodes:
        spans = []
        for blk in blocks:
            ps = [pos[x] for x in blk]
            spans.append((min(ps), max(ps) + 1))
        spans.sort()
        word = sentence[spans[0][0]] if kind == "P" else None
        nodes.append(Node(label=label, kind=kind, blocks=tuple(spans),
                          children=tuple(children), rule=rule, word=word))
    tree = DiscoTree(nodes=tuple(nodes), root=root, words=sentence)
    return Sample(sentence=sentence, tree=tree, logprob=sampler.logp)


# ---------------------------------------------------------------------------
# serialization

EXP_MAGIC = b"LCFRS2-EXP\0"
EXP_VERSION = 1


def save_grammar(grammar, path):
    d = grammar.dims
    with open(path, "wb") as f:
        f.write(EXP_MAGIC)
        f.write(struct.pack("<I", EXP_VERSION))
        f.write(struct.pack("<5Q", d.m1, d.m2, d.p, d.v, d.m))
        for arr in grammar.arrays().values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_grammar(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(EXP_MAGIC):
        raise ValueError(f"{path}: not an explicit grammar file")
    off = len(EXP_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    if version != EXP_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off += 4
    m1, m2, p, v, m = struct.unpack_from("<5Q", data, off)
    off += 40
    dims = GrammarDims(m1, m2, p, v)
    if dims.m != m:
        raise ValueError(f"{path}: inconsistent header")
    arrays = {}
    for name, shape in dims.shapes().items():
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n,
                                     offset=off).reshape(shape)
        off += 8 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return ExplicitGrammar(dims, **arrays)

"""CPD-factored grammars and the rank-space kernels derived from them.

Factor families are numbered by the rule they decompose::

    1: C1 (rule 1a)   U1 [m1 x r1]  V1 [m x r1]  W1 [m x r1]
    2: D1 (rule 2a)   U2 [m1 x r2]  V2 [m x r2]  W2 [m2 x r2]
    3: C2 (rule 1b)   U3 [m2 x r3]  V3 [m x r3]  W3 [m x r3]
    4: D2 (2b..2e)    U4 [m2 x r4]  V4 [m x r4]  W4 [m2 x r4]  P [4 x r4]

V and W (and P) are column-stochastic; each row of [U1 U2] and of [U3 U4]
sums to one, which makes the materialized tensors satisfy the rule
normalization of the explicit grammar.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .grammar import GrammarDims, ValidationReport, Violation, ShapeError

FACTOR_NAMES = ("U1", "V1", "W1", "U2", "V2", "W2", "U3", "V3", "W3",
                "U4", "V4", "W4", "P", "s", "Q")


@dataclass(frozen=True)
class FactoredGrammar:
    dims: GrammarDims
    ranks: tuple
    U1: object
    V1: object
    W1: object
    U2: object
    V2: object
    W2: object
    U3: object
    V3: object
    W3: object
    U4: object
    V4: object
    W4: object
    P: object
    s: object
    Q: object

    def expected_shapes(self):
        d, (r1, r2, r3, r4) = self.dims, self.ranks
        m1, m2, m, p, v = d.m1, d.m2, d.m, d.p, d.v
        return {"U1": (m1, r1), "V1": (m, r1), "W1": (m, r1),
                "U2": (m1, r2), "V2": (m, r2), "W2": (m2, r2),
                "U3": (m2, r3), "V3": (m, r3), "W3": (m, r3),
                "U4": (m2, r4), "V4": (m, r4), "W4": (m2, r4),
                "P": (4, r4), "s": (m1,), "Q": (p, v)}

    def check_shapes(self):
        for name, shape in self.expected_shapes().items():
            got = ad.value(getattr(self, name)).shape
            if got != shape:
                raise ShapeError(f"{name} has shape {got}, expected {shape}")

    def numpy(self):
        """Copy with every factor as a plain array (drops tape links)."""
        kw = {n: np.array(ad.value(getattr(self, n))) for n in FACTOR_NAMES}
        return FactoredGrammar(self.dims, tuple(self.ranks), **kw)

    def astype(self, dtype):
        kw = {n: np.asarray(ad.value(getattr(self, n)), dtype=dtype)
              for n in FACTOR_NAMES}
        return FactoredGrammar(self.dims, tuple(self.ranks), **kw)

    def factors(self):
        return {n: getattr(self, n) for n in FACTOR_NAMES}


def validate_factors(fg, tol=1e-9):
    fg.check_shapes()
    report = ValidationReport()
    arr = {n: np.asarray(ad.value(a), dtype=np.float64) for n, a in fg.factors().items()}
    for name, a in arr.items():
        if not np.all(np.isfinite(a)):
            report.violations.append(Violation(f"{name} non-finite", (), np.inf))
        neg = a < 0
        for idx in zip(*np.nonzero(neg)):
            report.violations.append(Violation(f"{name} negative", idx, float(-a[idx])))

    def check(rule, sums):
        for i, total in enumerate(np.atleast_1d(sums)):
            r = abs(float(total) - 1.0)
            if not r <= tol:
                report.violations.append(Violation(rule, (i,), r))

    for name in ("V1", "W1", "V2", "W2", "V3", "W3", "V4", "W4", "P"):
        if arr[name].shape[0]:
            check(f"{name} column", arr[name].sum(axis=0))
    check("U1+U2 row", arr["U1"].sum(axis=1) + arr["U2"].sum(axis=1))
    check("U3+U4 row", arr["U3"].sum(axis=1) + arr["U4"].sum(axis=1))
    check("start", arr["s"].sum())
    check("emission", arr["Q"].sum(axis=1))
    return report


def discontinuity_mass(fg):
    """Average probability mass of the discontinuous rule families.

    ``n1``: share of a fan-out-1 parent's mass on rule 2a (U2 columns);
    ``n2``: share of a fan-out-2 parent's mass on rules 2b-2e (U4 columns).
    """
    U2 = np.asarray(ad.value(fg.U2))
    U4 = np.asarray(ad.value(fg.U4))
    return {"n1": float(U2.sum(axis=1).mean()) if U2.size else 0.0,
            "n2": float(U4.sum(axis=1).mean()) if U4.size else 0.0}


def random_factored(dims, ranks, seed, dtype=np.float64):
    """Random factors that satisfy every normalization constraint."""
    rng = np.random.default_rng(seed)
    r1, r2, r3, r4 = ranks
    m1, m2, m, p, v = dims.m1, dims.m2, dims.m, dims.p, dims.v

    def pos(*shape):
        return rng.random(shape) + 0.05

    def cols(a):
        return a / a.sum(axis=0, keepdims=True) if a.shape[0] else a

    U12 = pos(m1, r1 + r2)
    U12 /= U12.sum(axis=1, keepdims=True)
    U34 = pos(m2, r3 + r4)
    U34 /= U34.sum(axis=1, keepdims=True) if m2 else 1.0
    s = pos(m1)
    Q = pos(p, v)
    fg = FactoredGrammar(
        dims, (r1, r2, r3, r4),
        U1=U12[:, :r1], V1=cols(pos(m, r1)), W1=cols(pos(m, r1)),
        U2=U12[:, r1:], V2=cols(pos(m, r2)), W2=cols(pos(m2, r2)),
        U3=U34[:, :r3], V3=cols(pos(m, r3)), W3=cols(pos(m, r3)),
        U4=U34[:, r3:], V4=cols(pos(m, r4)), W4=cols(pos(m2, r4)),
        P=cols(pos(4, r4)), s=s / s.sum(), Q=Q / Q.sum(axis=1, keepdims=True))
    return fg.astype(dtype)


def from_explicit(grammar):
    """Exact CPD of an explicit grammar: one rank-1 term per child tuple."""
    d = grammar.dims
    m1, m2, m = d.m1, d.m2, d.m
    eye_m, eye_m2, eye4 = np.eye(m), np.eye(m2), np.eye(4)
    bb, cc = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    bb, cc = bb.ravel(), cc.ravel()
    b2, c2 = np.meshgrid(np.arange(m), np.arange(m2), indexing="ij")
    b2, c2 = b2.ravel(), c2.ravel()
    b4, c4, d4 = np.meshgrid(np.arange(m), np.arange(m2), np.arange(4), indexing="ij")
    b4, c4, d4 = b4.ravel(), c4.ravel(), d4.ravel()
    ranks = (len(bb), len(b2), len(bb), len(b4))
    return FactoredGrammar(
        d, ranks,
        U1=grammar.C1.reshape(m1, -1), V1=eye_m[bb].T.copy(), W1=eye_m[cc].T.copy(),
        U2=grammar.D1.reshape(m1, -1), V2=eye_m[b2].T.copy(), W2=eye_m2[:, c2].copy(),
        U3=grammar.C2.reshape(m2, -1), V3=eye_m[bb].T.copy(), W3=eye_m[cc].T.copy(),
        U4=grammar.D2.reshape(m2, -1), V4=eye_m[b4].T.copy(), W4=eye_m2[:, c4].copy(),
        P=eye4[:, d4].copy(), s=np.array(grammar.s), Q=np.array(grammar.Q))


@dataclass(frozen=True)
class KernelSet:
    """Rank-to-rank matrices consumed by the rank-space inside pass.

    ``F[o] = V^o[:m1]^T U1`` and so on; ``proj1``/``proj2`` stack the
    fan-out-1 projections in the order B1 B2 B3 B4 C1 C3, ``emit`` holds the
    preterminal rows of the same families, ``Jcat``/``Kcat`` stack the
    fan-out-2 projections C2 C4.
    """
    F: dict
    G: dict
    H: dict
    I: dict
    J: dict
    K: dict
    R1: object
    R2: object
    P: object
    Q: object
    emit: object
    proj1: object
    proj2: object
    Jcat: object
    Kcat: object
    sizes: tuple

    def numpy(self):
        kw = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, dict):
                kw[f.name] = {k: np.array(ad.value(x)) for k, x in val.items()}
            elif f.name == "sizes":
                kw[f.name] = val
            else:
                kw[f.name] = np.array(ad.value(val))
        return KernelSet(**kw)


def precompute(fg):
    """Build the kernel set; works on arrays or on tape variables."""
    fg.check_shapes()
    m1 = fg.dims.m1
    top = slice(0, m1)
    low = slice(m1, None)
    V = {1: fg.V1, 2: fg.V2, 3: fg.V3, 4: fg.V4}
    W = {1: fg.W1, 2: fg.W2, 3: fg.W3, 4: fg.W4}
    F, G, H, I, J, K = {}, {}, {}, {}, {}, {}
    for o in (1, 2, 3, 4):
        vt = ad.transpose(ad.getitem(V[o], top))
        F[o] = ad.matmul(vt, fg.U1)
        G[o] = ad.matmul(vt, fg.U2)
    for o in (1, 3):
        wt = ad.transpose(ad.getitem(W[o], top))
        H[o] = ad.matmul(wt, fg.U1)
        I[o] = ad.matmul(wt, fg.U2)
    for o in (2, 4):
        wt = ad.transpose(W[o])
        J[o] = ad.matmul(wt, fg.U3)
        K[o] = ad.matmul(wt, fg.U4)
    emit = ad.concat([ad.getitem(V[1], low), ad.getitem(V[2], low),
                      ad.getitem(V[3], low), ad.getitem(V[4], low),
                      ad.getitem(W[1], low), ad.getitem(W[3], low)], axis=1)
    r1, r2, r3, r4 = fg.ranks
    return KernelSet(
        F=F, G=G, H=H, I=I, J=J, K=K,
        R1=ad.matmul(fg.s, fg.U1), R2=ad.matmul(fg.s, fg.U2),
        P=fg.P, Q=fg.Q, emit=emit,
        proj1=ad.concat([F[1], F[2], F[3], F[4], H[1], H[3]], axis=0),
        proj2=ad.concat([G[1], G[2], G[3], G[4], I[1], I[3]], axis=0),
        Jcat=ad.concat([J[2], J[4]], axis=0),
        Kcat=ad.concat([K[2], K[4]], axis=0),
        sizes=(r1, r2, r3, r4, r1, r3))

"""Slow, direct inference on explicit grammars.

Everything here loops over chart items in the most literal way possible;
these routines are the ground truth the rank-space code is tested against.
Fan-out-2 items are keyed ``(i, j, m, n)``: blocks ``[i, j)`` and
``[m, n)`` with ``i < j < m < n``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .grammar import D2_VARIANTS, ShapeError
from .tree import DiscoTree, TreeError, tree_from_nested

NEG_INF = -math.inf
MAX_ENUM_LEN = 8


def _check_sentence(grammar, sentence):
    sentence = tuple(int(w) for w in sentence)
    for w in sentence:
        if not 0 <= w < grammar.dims.v:
            raise ValueError(f"terminal id {w} outside vocabulary of size "
                             f"{grammar.dims.v}")
    return sentence


def cells4_by_yield(n):
    """Fan-out-2 cells grouped by total yield."""
    out = {}
    for i in range(n + 1):
        for j in range(i + 1, n + 1):
            for m in range(j + 1, n + 1):
                for k in range(m + 1, n + 1):
                    out.setdefault((j - i) + (k - m), []).append((i, j, m, k))
    return out


@dataclass
class ExplicitChart:
    alpha1: np.ndarray       # [n+1, n+1, m1+p]
    alpha2: dict             # (i, j, m, n) -> [m2]
    scale: np.ndarray        # log scale per yield length

    def inside1(self, i, j):
        return self.alpha1[i, j] * math.exp(self.scale[j - i])

    def inside2(self, i, j, m, n):
        return self.alpha2[i, j, m, n] * math.exp(self.scale[(j - i) + (n - m)])


def inside_explicit(grammar, sentence, deadline=None):
    """Log partition function by the deduction system over explicit tensors.

    Chart layers (items of equal total yield) are rescaled so that their
    largest entry is one; ``chart.scale`` holds the log factors.  When
    ``deadline`` (a ``time.perf_counter`` value) passes, TimeoutError is
    raised.
    """
    sentence = _check_sentence(grammar, sentence)
    n = len(sentence)
    if n < 2:
        return NEG_INF, None
    d = grammar.dims
    m1, m2, m = d.m1, d.m2, d.m
    C1, D1, C2, D2 = grammar.C1, grammar.D1, grammar.C2, grammar.D2
    a1 = np.zeros((n + 1, n + 1, m))
    a2 = {}
    scale = np.full(n + 1, NEG_INF)
    scale[0] = 0.0
    for i, w in enumerate(sentence):
        a1[i, i + 1, m1:] = grammar.Q[:, w]
    top = a1[:, :, m1:].max()
    if top > 0:
        a1 /= top
        scale[1] = math.log(top)
    layers4 = cells4_by_yield(n)

    for L in range(2, n + 1):
        pairs = [scale[a] + scale[L - a] for a in range(1, L)]
        base = max(pairs)
        if base == NEG_INF:
            break
        fac = np.zeros(L)
        for a in range(1, L):
            fac[a] = math.exp(pairs[a - 1] - base)
        new2 = {}
        for (i, j, k, l) in layers4.get(L, ()) if m2 else ():
            if deadline is not None and time.perf_counter() > deadline:
                raise TimeoutError("explicit inside exceeded its deadline")
            acc = fac[j - i] * np.einsum("abc,b,c->a", C2, a1[i, j], a1[k, l])
            for q in range(i + 1, j):
                cc = a2.get((q, j, k, l))
                if cc is not None:       # 2b: B [i,q), C [q,j),[k,l)
                    acc += fac[q - i] * np.einsum("abc,b,c->a", D2[..., 0], a1[i, q], cc)
                cc = a2.get((i, q, k, l))
                if cc is not None:       # 2c: B [q,j), C [i,q),[k,l)
                    acc += fac[j - q] * np.einsum("abc,b,c->a", D2[..., 1], a1[q, j], cc)
            for q in range(k + 1, l):
                cc = a2.get((i, j, q, l))
                if cc is not None:       # 2d: B [k,q), C [i,j),[q,l)
                    acc += fac[q - k] * np.einsum("abc,b,c->a", D2[..., 2], a1[k, q], cc)
                cc = a2.get((i, j, k, q))
                if cc is not None:       # 2e: B [q,l), C [i,j),[k,q)
                    acc += fac[l - q] * np.einsum("abc,b,c->a", D2[..., 3], a1[q, l], cc)
            new2[i, j, k, l] = acc
        new1 = {}
        for i in range(0, n - L + 1):
            if deadline is not None and time.perf_counter() > deadline:
                raise TimeoutError("explicit inside exceeded its deadline")
            j = i + L
            acc = np.zeros(m1)
            for q in range(i + 1, j):    # 1a
                acc += fac[q - i] * np.einsum("abc,b,c->a", C1, a1[i, q], a1[q, j])
            if m2:
                for k in range(i + 1, j):
                    for l in range(k + 1, j):   # 2a: B [k,l), C [i,k),[l,j)
                        cc = a2.get((i, k, l, j))
                        if cc is not None:
                            acc += fac[l - k] * np.einsum("abc,b,c->a", D1, a1[k, l], cc)
            new1[i, j] = acc
        top = max([v.max() for v in new1.values()] +
                  [v.max() for v in new2.values()] + [0.0])
        if top > 0:
            scale[L] = base + math.log(top)
        else:
            top = 1.0
        for (i, j), vec in new1.items():
            a1[i, j, :m1] = vec / top
        for key, vec in new2.items():
            a2[key] = vec / top
    chart = ExplicitChart(alpha1=a1, alpha2=a2, scale=scale)
    z = float(grammar.s @ a1[0, n, :m1])
    if z <= 0 or scale[n] == NEG_INF:
        return NEG_INF, chart
    return math.log(z) + scale[n], chart


# ---------------------------------------------------------------------------
# enumeration


class _Truncated(Exception):
    pass


@dataclass
class Enumeration:
    derivations: list       # (DiscoTree, logprob)
    truncated: bool

    def __len__(self):
        return len(self.derivations)

    def logsumexp(self):
        if self.truncated:
            raise RuntimeError("enumeration was truncated")
        if not self.derivations:
            return NEG_INF
        lp = np.array([x[1] for x in self.derivations])
        top = lp.max()
        return float(top + np.log(np.exp(lp - top).sum()))


class _Enumerator:
    def __init__(self, grammar, sentence, cap):
        self.g = grammar
        self.w = sentence
        self.cap = cap
        self.memo = {}
        with np.errstate(divide="ignore"):
            self.lg = {k: np.log(v) for k, v in grammar.arrays().items()}

    def _keep(self, out):
        if len(out) > self.cap:
            raise _Truncated
        return out

    def fan1(self, b, i, j):
        key = (1, b, i, j)
        if key in self.memo:
            return self.memo[key]
        g, lg = self.g, self.lg
        m1, m2, m = g.dims.m1, g.dims.m2, g.dims.m
        out = []
        if b >= m1:
            t = b - m1
            if j == i + 1 and g.Q[t, self.w[i]] > 0:
                out.append((lg["Q"][t, self.w[i]], ("emit", t, ((i, j),), ())))
        elif j - i >= 2:
            for k in range(i + 1, j):
                for bb in range(m):
                    left = self.fan1(bb, i, k)
                    if not left:
                        continue
                    for cc in range(m):
                        if g.C1[b, bb, cc] <= 0:
                            continue
                        right = self.fan1(cc, k, j)
                        r = lg["C1"][b, bb, cc]
                        for lp1, t1 in left:
                            for lp2, t2 in right:
                                out.append((r + lp1 + lp2,
                                            ("1a", b, ((i, j),), (t1, t2))))
                        self._keep(out)
            for k in range(i + 1, j):
                for l in range(k + 1, j):
                    for bb in range(m):
                        mid = self.fan1(bb, k, l)
                        if not mid:
                            continue
                        for cc in range(m2):
                            if g.D1[b, bb, cc] <= 0:
                                continue
                            outer = self.fan2(cc, i, k, l, j)
                            r = lg["D1"][b, bb, cc]
                            for lp1, t1 in mid:
                                for lp2, t2 in outer:
                                    out.append((r + lp1 + lp2,
                                                ("2a", b, ((i, j),), (t1, t2))))
                            self._keep(out)
        self.memo[key] = out
        return out

    def fan2(self, c, i, j, k, l):
        key = (2, c, i, j, k, l)
        if key in self.memo:
            return self.memo[key]
        g, lg = self.g, self.lg
        m2, m = g.dims.m2, g.dims.m
        blocks = ((i, j), (k, l))
        out = []
        for bb in range(m):
            left = self.fan1(bb, i, j)
            if not left:
                continue
            for cc in range(m):
                if g.C2[c, bb, cc] <= 0:
                    continue
                right = self.fan1(cc, k, l)
                r = lg["C2"][c, bb, cc]
                for lp1, t1 in left:
                    for lp2, t2 in right:
                        out.append((r + lp1 + lp2, ("1b", c, blocks, (t1, t2))))
                self._keep(out)
        # (variant, B span, C item) for every split
        moves = []
        for q in range(i + 1, j):
            moves.append((0, (i, q), (q, j, k, l)))
            moves.append((1, (q, j), (i, q, k, l)))
        for q in range(k + 1, l):
            moves.append((2, (k, q), (i, j, q, l)))
            moves.append((3, (q, l), (i, j, k, q)))
        for d, (bi, bj), citem in moves:
            for bb in range(m):
                left = self.fan1(bb, bi, bj)
                if not left:
                    continue
                for cc in range(m2):
                    if g.D2[c, bb, cc, d] <= 0:
                        continue
                    right = self.fan2(cc, *citem)
                    r = lg["D2"][c, bb, cc, d]
                    for lp1, t1 in left:
                        for lp2, t2 in right:
                            out.append((r + lp1 + lp2,
                                        (D2_VARIANTS[d], c, blocks, (t1, t2))))
                    self._keep(out)
        self.memo[key] = out
        return out

    def root(self):
        g, n = self.g, len(self.w)
        out = []
        for a in range(g.dims.m1):
            if g.s[a] <= 0:
                continue
            for lp, t in self.fan1(a, 0, n):
                out.append((self.lg["s"][a] + lp, ("start", 0, ((0, n),), (t,))))
            self._keep(out)
        return out


def iter_nested_derivations(grammar, sentence, cap=2_000_000):
    """(logprob, nested-tuple tree) pairs without building DiscoTree objects."""
    sentence = _check_sentence(grammar, sentence)
    if len(sentence) > MAX_ENUM_LEN:
        raise ValueError(f"enumeration refused for length {len(sentence)} > "
                         f"{MAX_ENUM_LEN}")
    if len(sentence) < 2:
        return [], False
    en = _Enumerator(grammar, sentence, cap)
    try:
        return en.root(), False
    except _Truncated:
        return [], True


def enumerate_derivations(grammar, sentence, cap=200_000):
    """Every derivation of ``sentence`` with nonzero probability."""
    sentence = tuple(int(w) for w in sentence)
    raw, truncated = iter_nested_derivations(grammar, sentence, cap)
    ders = [(tree_from_nested(t, sentence), lp) for lp, t in raw]
    return Enumeration(derivations=ders, truncated=truncated)


# ---------------------------------------------------------------------------
# scoring


def _child_index(grammar, node):
    if node.kind == "N1":
        return node.label
    if node.kind == "P":
        return grammar.dims.m1 + node.label
    raise TreeError(f"node of kind {node.kind} cannot fill a fan-out-1 slot")


def score_derivation(grammar, tree):
    """Sum of log rule probabilities along ``tree``."""
    tree.validate()
    g = grammar
    total = 0.0
    with np.errstate(divide="ignore"):
        for node in tree.nodes:
            rule = node.rule
            kids = [tree.nodes[c] for c in node.children]
            if rule == "start":
                (a,) = kids
                if a.kind != "N1" or a.blocks != node.blocks or len(node.blocks) != 1:
                    raise TreeError("start rule must rewrite to a fan-out-1 symbol")
                total += np.log(g.s[a.label])
            elif rule == "emit":
                if node.kind != "P" or kids or len(node.blocks) != 1:
                    raise TreeError("malformed preterminal")
                (i, j), = node.blocks
                if j != i + 1:
                    raise TreeError("preterminal must cover one position")
                total += np.log(g.Q[node.label, tree.words[i]])
            elif rule in ("1a", "2a", "1b") + D2_VARIANTS:
                total += _binary_score(g, node, kids)
            else:
                raise TreeError(f"rule {rule!r} outside the restricted inventory")
    return float(total)


def _binary_score(g, node, kids):
    rule = node.rule
    if len(kids) != 2:
        raise TreeError(f"rule {rule} needs two children")
    B, C = kids
    b = _child_index(g, B)
    if B.fanout != 1:
        raise TreeError(f"rule {rule}: first child must have fan-out 1")
    (x,) = B.blocks
    if rule in ("1a", "1b"):
        c = _child_index(g, C)
        if C.fanout != 1:
            raise TreeError(f"rule {rule}: second child must have fan-out 1")
        (y,) = C.blocks
        if rule == "1a":
            if node.kind != "N1" or x[1] != y[0] or node.blocks != ((x[0], y[1]),):
                raise TreeError("1a yield mismatch")
            return np.log(g.C1[node.label, b, c])
        if node.kind != "N2" or not x[1] < y[0] or node.blocks != (x, y):
            raise TreeError("1b yield mismatch")
        return np.log(g.C2[node.label, b, c])
    if C.kind != "N2" or C.fanout != 2:
        raise TreeError(f"rule {rule}: second child must be a fan-out-2 symbol")
    y, z = C.blocks
    c = C.label
    if rule == "2a":
        if node.kind != "N1" or y[1] != x[0] or x[1] != z[0] or node.blocks != ((y[0], z[1]),):
            raise TreeError("2a yield mismatch")
        return np.log(g.D1[node.label, b, c])
    if node.kind != "N2":
        raise TreeError(f"{rule} must produce a fan-out-2 symbol")
    d = D2_VARIANTS.index(rule)
    expect = {
        0: ((x[0], y[1]), z) if x[1] == y[0] else None,
        1: ((y[0], x[1]), z) if y[1] == x[0] else None,
        2: (y, (x[0], z[1])) if x[1] == z[0] else None,
        3: (y, (z[0], x[1])) if z[1] == x[0] else None,
    }[d]
    if expect is None or node.blocks != expect:
        raise TreeError(f"{rule} yield mismatch")
    return np.log(g.D2[node.label, b, c, d])


# ---------------------------------------------------------------------------
# Viterbi


class NoParse(Exception):
    """The grammar assigns zero probability to every derivation."""


def viterbi_explicit(grammar, sentence):
    """Best derivation under (max, +) over log probabilities.

    Ties prefer the earlier rule tag (1a < 1b < 2a < 2b ... < 2e), then the
    smaller split point, then the smaller child symbol pair.
    """
    sentence = _check_sentence(grammar, sentence)
    n = len(sentence)
    if n < 2:
        raise NoParse("no derivation yields fewer than two words")
    g = grammar
    m1, m2, m = g.dims.m1, g.dims.m2, g.dims.m
    with np.errstate(divide="ignore"):
        lg = {k: np.log(v) for k, v in g.arrays().items()}
    v1 = np.full((n + 1, n + 1, m), NEG_INF)
    bp1 = {}
    v2 = {}
    bp2 = {}
    for i, w in enumerate(sentence):
        v1[i, i + 1, m1:] = lg["Q"][:, w]

    def best_pair(table, left, right):
        # scores[a, b, c] = rule + left[b] + right[c]; returns max and argmax per a
        sc = table + left[None, :, None] + right[None, None, :]
        flat = sc.reshape(sc.shape[0], -1)
        arg = flat.argmax(axis=1)
        return flat[np.arange(len(arg)), arg], arg

    def update(best, back, cand, arg, info, width):
        better = cand > best
        for a in np.nonzero(better)[0]:
            b, c = divmod(int(arg[a]), width)
            back[a] = info + (b, c)
        return np.where(better, cand, best)

    layers4 = cells4_by_yield(n)
    for L in range(2, n + 1):
        for (i, j, k, l) in layers4.get(L, ()) if m2 else ():
            best = np.full(m2, NEG_INF)
            back = [None] * m2
            cand, arg = best_pair(lg["C2"], v1[i, j], v1[k, l])
            best = update(best, back, cand, arg, ("1b",), m)
            moves = []
            for d in range(4):
                if d < 2:
                    qs = range(i + 1, j)
                else:
                    qs = range(k + 1, l)
                for q in qs:
                    bspan, citem = [((i, q), (q, j, k, l)), ((q, j), (i, q, k, l)),
                                    ((k, q), (i, j, q, l)), ((q, l), (i, j, k, q))][d]
                    moves.append((d, q, bspan, citem))
            for d, q, bspan, citem in moves:
                if citem not in v2:
                    continue
                cand, arg = best_pair(lg["D2"][..., d], v1[bspan], v2[citem])
                best = update(best, back, cand, arg, (D2_VARIANTS[d], bspan, citem), m2)
            v2[i, j, k, l] = best
            bp2[i, j, k, l] = back
        for i in range(0, n - L + 1):
            j = i + L
            best = np.full(m1, NEG_INF)
            back = [None] * m1
            for q in range(i + 1, j):
                cand, arg = best_pair(lg["C1"], v1[i, q], v1[q, j])
                best = update(best, back, cand, arg, ("1a", q), m)
            if m2:
                for k in range(i + 1, j):
                    for l in range(k + 1, j):
                        cand, arg = best_pair(lg["D1"], v1[k, l], v2[i, k, l, j])
                        best = update(best, back, cand, arg, ("2a", k, l), m2)
            v1[i, j, :m1] = best
            bp1[i, j] = back
    root = lg["s"] + v1[0, n, :m1]
    a = int(root.argmax())
    if root[a] == NEG_INF:
        raise NoParse("no derivation with nonzero probability")

    def build1(b, i, j):
        if b >= m1:
            return ("emit", b - m1, ((i, j),), ())
        info = bp1[i, j][b]
        if info[0] == "1a":
            _, q, bb, cc = info
            return ("1a", b, ((i, j),), (build1(bb, i, q), build1(cc, q, j)))
        _, k, l, bb, cc = info
        return ("2a", b, ((i, j),), (build1(bb, k, l), build2(cc, (i, k, l, j))))

    def build2(c, item):
        i, j, k, l = item
        info = bp2[item][c]
        blocks = ((i, j), (k, l))
        if info[0] == "1b":
            _, bb, cc = info
            return ("1b", c, blocks, (build1(bb, i, j), build1(cc, k, l)))
        rule, bspan, citem, bb, cc = info
        return (rule, c, blocks, (build1(bb, *bspan), build2(cc, citem)))

    nested = ("start", 0, ((0, n),), (build1(a, 0, n),))
    return tree_from_nested(nested, sentence), float(root[a])

"""Rank-space inside pass, span marginals and MBR decoding.

Chart cells hold rank vectors (mantissas) normalized so their largest entry
is one, plus a per-cell log scale kept outside the tape: the scales are
constants for differentiation, which leaves gradients of log Z exact.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .chartplan import chart_plan
from .factored import precompute
from .grammar import NumericError
from .tree import DiscoTree, Node

NEG_INF = -math.inf
MBR_MAX_LEN = 40


class NoParse(ValueError):
    """log Z is minus infinity, so marginals are undefined."""


@dataclass
class RankChart:
    n: int
    scale2: np.ndarray          # [N*N, b] per continuous cell
    scale4: np.ndarray          # [n4, b] per fan-out-2 cell
    buffers: dict               # family name -> Buffer
    kept: list                  # per layer: (layer, a1, a2, a3, a4) tape nodes
    base: object                # preterminal emission vectors [n, b, p]
    logZ: object                # [b]


@dataclass
class SpanMarginals:
    X: np.ndarray               # [N, N]: continuous span [i, j)
    Y: np.ndarray               # [N, N, N, N]: blocks [i, j), [m, n)

    def total(self):
        return float(self.X.sum() + self.Y.sum())


def _normalize(x, scale_in):
    """Divide each cell by its max entry; return (node, new log scale)."""
    val = ad.value(x)
    top = val.max(axis=-1) if val.shape[-1] else np.zeros(val.shape[:-1], val.dtype)
    zero = ~(top > 0) | ~np.isfinite(scale_in)
    safe = np.where(zero, 1.0, top).astype(val.dtype)
    with np.errstate(divide="ignore"):
        scale = np.where(zero, NEG_INF, scale_in + np.log(safe))
    return ad.mul(x, (1.0 / safe)[..., None]), scale


def _weights(t, S, dtype):
    S_safe = np.where(np.isfinite(S), S, 0.0)
    with np.errstate(invalid="ignore"):
        w = np.exp(t - S_safe)
    return np.nan_to_num(w, nan=0.0).astype(dtype)[..., None]


def _check(node, what, L):
    val = ad.value(node)
    if not np.all(np.isfinite(val)):
        bad = np.argwhere(~np.isfinite(val))[0]
        raise NumericError(f"non-finite {what} value in layer {L} at {tuple(bad)}")


def rank_pass(ks, words, tape=None, keep=False):
    """Run the rank-space inside pass over a batch of equal-length sentences.

    ``words`` is [b, n].  Returns a RankChart whose ``logZ`` is a [b] array
    (or tape variable).
    """
    words = np.asarray(words, dtype=np.int64)
    b, n = words.shape
    plan = chart_plan(n)
    N = n + 1
    r1, r2, r3, r4 = ks.sizes[:4]
    sizes = ks.sizes
    dtype = ad.value(ks.proj1).dtype
    names = ("B1", "B2", "B3", "B4", "C1", "C3")
    bufs = {nm: ad.Buffer((N * N, b, sz), dtype, tape) for nm, sz in zip(names, sizes)}
    bufs["C2"] = ad.Buffer((plan.n4, b, r2), dtype, tape)
    bufs["C4"] = ad.Buffer((plan.n4, b, r4), dtype, tape)
    s2 = np.full((N * N, b), NEG_INF)
    s4 = np.full((plan.n4, b), NEG_INF)
    offs = np.concatenate([[0], np.cumsum(sizes)])

    def write_spans(rows, proj):
        for k, nm in enumerate(names):
            bufs[nm].write(rows, ad.getitem(proj, (Ellipsis, slice(offs[k], offs[k + 1]))))

    # preterminal layer
    q = ad.take(ad.transpose(ks.Q), words.T.reshape(-1))
    q = ad.reshape(q, (n, b, -1))
    if tape is not None and not isinstance(q, ad.Var):
        q = tape.leaf(q, "emission")
    proj, sc = _normalize(ad.matmul(q, ks.emit), np.zeros((n, b)))
    rows = plan.layers[0].span_rows
    s2[rows] = sc
    write_spans(rows, proj)

    JT, KT = ad.transpose(ks.Jcat), ad.transpose(ks.Kcat)
    P1 = ad.reshape(ks.P, (4, 1, r4))
    pr1, pr2 = ad.transpose(ks.proj1), ad.transpose(ks.proj2)
    kept = []
    logZ = None
    has4 = r2 + r4 > 0 and plan.n4 > 0

    for layer in plan.layers[1:]:
        L = layer.L
        a3w = a4 = None
        if has4 and len(layer.cells4):
            a3 = ad.mul(bufs["B3"].read(layer.a3_left), bufs["C3"].read(layer.a3_right))
            t3 = s2[layer.a3_left] + s2[layer.a3_right]
            g4 = layer.a4
            S = t3
            if len(g4) and r4:
                t4 = s2[g4.left] + s4[g4.right]
                S = np.maximum(S, g4.segmax(t4))
            a3w = ad.mul(a3, _weights(t3, S, dtype))
            out = ad.matmul(a3w, JT)
            if len(g4) and r4:
                prod = ad.mul(ad.mul(bufs["B4"].read(g4.left), bufs["C4"].read(g4.right)),
                              ad.take(P1, g4.variant))
                prod = ad.mul(prod, _weights(t4, S[g4.target], dtype))
                a4 = ad.segment_sum(prod, g4.indicator)
                out = ad.add(out, ad.matmul(a4, KT))
            _check(out, "fan-out-2", L)
            out, sc = _normalize(out, S)
            s4[layer.cells4] = sc
            bufs["C2"].write(layer.cells4, ad.getitem(out, (Ellipsis, slice(0, r2))))
            bufs["C4"].write(layer.cells4, ad.getitem(out, (Ellipsis, slice(r2, r2 + r4))))

        g1, g2 = layer.a1, layer.a2
        t1 = s2[g1.left] + s2[g1.right]
        S = g1.segmax(t1)
        use2 = has4 and len(g2) and r2
        if use2:
            t2 = s2[g2.left] + s4[g2.right]
            S = np.maximum(S, g2.segmax(t2))
        prod1 = ad.mul(bufs["B1"].read(g1.left), bufs["C1"].read(g1.right))
        a1 = ad.segment_sum(ad.mul(prod1, _weights(t1, S[g1.target], dtype)),
                            g1.indicator)
        a2 = None
        if use2:
            prod2 = ad.mul(bufs["B2"].read(g2.left), bufs["C2"].read(g2.right))
            a2 = ad.segment_sum(ad.mul(prod2, _weights(t2, S[g2.target], dtype)),
                                g2.indicator)
        if keep:
            kept.append((layer, a1, a2, a3w, a4))
        if L == n:
            z = ad.sum(ad.mul(a1, ks.R1), axis=-1)
            if a2 is not None:
                z = ad.add(z, ad.sum(ad.mul(a2, ks.R2), axis=-1))
            z = ad.reshape(z, (b,))
            logZ = ad.add(ad.log(z), np.where(np.isfinite(S[0]), S[0], 0.0).astype(dtype))
            zero = ~np.isfinite(S[0]) | ~(ad.value(z) > 0)
            if np.any(zero):
                if isinstance(logZ, ad.Var):
                    logZ.value = np.where(zero, NEG_INF, logZ.value)
                else:
                    logZ = np.where(zero, NEG_INF, logZ)
            break
        proj = ad.matmul(a1, pr1)
        if a2 is not None:
            proj = ad.add(proj, ad.matmul(a2, pr2))
        _check(proj, "fan-out-1", L)
        proj, sc = _normalize(proj, S)
        s2[layer.span_rows] = sc
        write_spans(layer.span_rows, proj)

    return RankChart(n=n, scale2=s2, scale4=s4, buffers=bufs, kept=kept,
                     base=q, logZ=logZ)


def inside_rank(kernels, fg, sentence):
    """Log partition function of one sentence via the rank-space pass."""
    sentence = np.asarray(sentence, dtype=np.int64)
    if len(sentence) < 2:
        return NEG_INF, None
    if np.any(sentence < 0) or np.any(sentence >= fg.dims.v):
        raise ValueError("terminal id outside the vocabulary")
    chart = rank_pass(kernels, sentence[None, :])
    return float(ad.value(chart.logZ)[0]), chart


def batch_marginals(kernels, words):
    """Span marginals for a [b, n] batch by differentiating log Z."""
    words = np.asarray(words, dtype=np.int64)
    b, n = words.shape
    tape = ad.Tape()
    chart = rank_pass(kernels, words, tape=tape, keep=True)
    logZ = chart.logZ
    lz = ad.value(logZ).copy()
    bad = ~np.isfinite(lz)
    seed = np.where(bad, 0.0, 1.0).astype(logZ.value.dtype)
    # keep -inf sentences out of the sweep
    logZ.value = np.where(bad, 0.0, logZ.value)
    tape.backward(logZ, seed=seed)
    N = n + 1
    plan = chart_plan(n)
    X = np.zeros((b, N, N))
    Y = np.zeros((b, N, N, N, N))

    def contrib(node):
        if node is None or node.grad is None:
            return 0.0
        return (node.value.astype(np.float64) * node.grad).sum(axis=-1)

    q = chart.base
    base = contrib(q)                                   # [n, b]
    idx = np.arange(n)
    X[:, idx, idx + 1] = np.asarray(base).T
    for layer, a1, a2, a3, a4 in chart.kept:
        xs = contrib(a1) + contrib(a2)
        if np.ndim(xs):
            i, j = np.divmod(layer.span_rows, N)
            X[:, i, j] = np.asarray(xs).T
        ys = contrib(a3) + contrib(a4)
        if np.ndim(ys):
            c = plan.cell4[layer.cells4]
            Y[:, c[:, 0], c[:, 1], c[:, 2], c[:, 3]] = np.asarray(ys).T
    X[bad] = 0.0
    Y[bad] = 0.0
    return lz, X, Y


def marginals(fg, kernels, sentence):
    """(logZ, SpanMarginals) for one sentence; raises NoParse if Z = 0."""
    sentence = np.asarray(sentence, dtype=np.int64)
    if len(sentence) < 2:
        raise NoParse("sentences shorter than two words have no derivation")
    if np.any(sentence < 0) or np.any(sentence >= fg.dims.v):
        raise ValueError("terminal id outside the vocabulary")
    lz, X, Y = batch_marginals(kernels, sentence[None, :])
    if not np.isfinite(lz[0]):
        raise NoParse("log Z is -inf")
    return float(lz[0]), SpanMarginals(X=X[0], Y=Y[0])


# ---------------------------------------------------------------------------
# MBR decoding


def mbr_decode(marg, n):
    """Binary restricted-LCFRS-2 topology with the largest summed marginals.

    Ties prefer continuous deductions (1a over 2a, 1b over 2b-2e), then the
    smaller split index.
    """
    if n < 2:
        raise ValueError("no tree exists for fewer than two words")
    X, Y = np.asarray(marg.X, dtype=np.float64), np.asarray(marg.Y, dtype=np.float64)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("marginals must be finite")
    plan = chart_plan(n)
    N = n + 1
    best2 = np.zeros(N * N)
    best4 = np.zeros(plan.n4)
    back2, back4 = {}, {}
    c4 = plan.cell4
    rows = plan.layers[0].span_rows
    best2[rows] = X[np.arange(n), np.arange(n) + 1]
    for layer in plan.layers[1:]:
        if len(layer.cells4):
            cells = layer.cells4
            cand3 = best2[layer.a3_left] + best2[layer.a3_right]
            g4 = layer.a4
            top = cand3
            choice = np.full(len(cells), -1)
            if len(g4):
                v4 = best2[g4.left] + best4[g4.right]
                m4 = g4.segmax(v4)
                first = g4.first_argmax(v4, m4)
                better = m4 > cand3
                top = np.where(better, m4, cand3)
                choice = np.where(better, first, -1)
            ys = Y[c4[cells, 0], c4[cells, 1], c4[cells, 2], c4[cells, 3]]
            best4[cells] = ys + top
            for loc, cell in enumerate(cells):
                back4[cell] = (layer, loc, choice[loc])
        g1, g2 = layer.a1, layer.a2
        v1 = best2[g1.left] + best2[g1.right]
        m1 = g1.segmax(v1)
        first1 = g1.first_argmax(v1, m1)
        top, choice = m1, first1
        rule = np.zeros(len(layer.span_rows), dtype=np.int64)
        if len(g2):
            v2 = best2[g2.left] + best4[g2.right]
            m2 = g2.segmax(v2)
            first2 = g2.first_argmax(v2, m2)
            better = m2 > m1
            top = np.where(better, m2, m1)
            choice = np.where(better, first2, first1)
            rule = better.astype(np.int64)
        i, j = np.divmod(layer.span_rows, N)
        best2[layer.span_rows] = X[i, j] + top
        for loc, r in enumerate(layer.span_rows):
            back2[r] = (layer, rule[loc], choice[loc])

    nodes = []

    def add(blocks, children, rule):
        kind = "P" if rule == "emit" else "X"
        nodes.append(Node(label="X", kind=kind, blocks=blocks,
                          children=tuple(children), rule=rule))
        return len(nodes) - 1

    def span(r):
        i, j = divmod(int(r), N)
        if j == i + 1:
            return add(((i, j),), (), "emit")
        layer, which, t = back2[r]
        if which == 0:
            g = layer.a1
            kids = (span(g.left[t]), span(g.right[t]))
            return add(((i, j),), kids, "1a")
        g = layer.a2
        kids = (span(g.left[t]), disc(g.right[t]))
        return add(((i, j),), kids, "2a")

    def disc(cid):
        i, j, m, k = (int(x) for x in c4[cid])
        layer, loc, t = back4[int(cid)]
        blocks = ((i, j), (m, k))
        if t < 0:
            kids = (span(layer.a3_left[loc]), span(layer.a3_right[loc]))
            return add(blocks, kids, "1b")
        g = layer.a4
        kids = (span(g.left[t]), disc(g.right[t]))
        return add(blocks, kids, ("2b", "2c", "2d", "2e")[g.variant[t]])

    root = span(plan.row(0, n))
    return DiscoTree(nodes=tuple(nodes), root=root)


def tree_score(tree, marg):
    """Sum of X over continuous nodes and Y over fan-out-2 nodes."""
    total = 0.0
    for node in tree.nodes:
        if node.kind == "T":
            continue
        if len(node.blocks) == 1:
            (i, j), = node.blocks
            total += marg.X[i, j]
        else:
            (i, j), (m, k) = node.blocks
            total += marg.Y[i, j, m, k]
    return total


# ---------------------------------------------------------------------------
# corpus driver


@dataclass
class ParseFailure:
    index: int
    reason: str

    def __bool__(self):
        return False


def flat_tree(n):
    leaves = [Node(label="X", kind="P", blocks=((i, i + 1),), rule="emit")
              for i in range(n)]
    root = Node(label="FLAT", kind="X", blocks=((0, n),),
                children=tuple(range(n)), rule="flat")
    return DiscoTree(nodes=tuple(leaves) + (root,), root=n)


def _parse_chunk(args):
    kernels, v, items = args
    out = []
    if not items:
        return out
    words = np.array([s for _, s in items], dtype=np.int64)
    lz, X, Y = batch_marginals(kernels, words)
    n = words.shape[1]
    for k, (idx, _) in enumerate(items):
        if not np.isfinite(lz[k]):
            out.append((idx, ParseFailure(idx, "log Z is -inf"), lz[k]))
            continue
        tree = mbr_decode(SpanMarginals(X=X[k], Y=Y[k]), n)
        out.append((idx, tree, float(lz[k])))
    return out


def parse_corpus(fg, sentences, workers=1, max_len=MBR_MAX_LEN, chunk=16,
                 kernels=None, with_logz=False):
    """MBR trees for every sentence, in input order.

    Failures (out-of-vocabulary ids, length < 2) become ParseFailure
    entries; sentences longer than ``max_len`` get a flat tree.  Batches are
    formed before work is distributed, so results do not depend on
    ``workers``.
    """
    if kernels is None:
        kernels = precompute(fg).numpy()
    v = fg.dims.v
    results = [None] * len(sentences)
    logz = [math.nan] * len(sentences)
    by_len = {}
    for idx, sent in enumerate(sentences):
        sent = tuple(int(w) for w in sent)
        if len(sent) < 2:
            results[idx] = ParseFailure(idx, "sentence shorter than two words")
        elif any(not 0 <= w < v for w in sent):
            results[idx] = ParseFailure(idx, "terminal id outside the vocabulary")
        elif len(sent) > max_len:
            results[idx] = flat_tree(len(sent))
        else:
            by_len.setdefault(len(sent), []).append((idx, sent))
    jobs = []
    for n in sorted(by_len):
        items = by_len[n]
        for s in range(0, len(items), chunk):
            jobs.append((kernels, v, items[s:s + chunk]))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_parse_chunk, jobs))
    else:
        outs = [_parse_chunk(j) for j in jobs]
    for out in outs:
        for idx, tree, lz in out:
            results[idx] = tree
            logz[idx] = lz
    if with_logz:
        return results, logz
    return results

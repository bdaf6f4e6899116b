"""Span posteriors by brute-force enumeration, shared by the marginal tests."""
import numpy as np

from tnlcfrs.oracle import iter_nested_derivations


def posterior_spans(g, sent):
    raw, truncated = iter_nested_derivations(g, sent)
    assert not truncated
    lps = np.array([lp for lp, _ in raw])
    w = np.exp(lps - lps.max())
    w /= w.sum()
    N = len(sent) + 1
    X = np.zeros((N, N))
    Y = np.zeros((N, N, N, N))

    def visit(t, weight):
        rule, _, blocks, kids = t
        if rule != "start":
            if len(blocks) == 1:
                X[blocks[0]] += weight
            else:
                Y[blocks[0] + blocks[1]] += weight
        for k in kids:
            visit(k, weight)

    for wk, (_, t) in zip(w, raw):
        visit(t, wk)
    return X, Y

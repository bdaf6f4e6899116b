"""Index plans for vectorized chart passes over a sentence length.

A plan lists, for every total-yield layer, the chart cells of that layer and
the (target, child, child) triples of every deduction that builds them.
Continuous cells ``[i, j)`` live at row ``i * (n + 1) + j``; fan-out-2 cells
``([i, j), [m, k))`` are numbered in lexicographic order of ``(i, j, m, k)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import chain, combinations

import numpy as np
from scipy import sparse

# variant codes for fan-out-2 deductions
V2B, V2C, V2D, V2E = 0, 1, 2, 3


def _combos(n_points, r):
    flat = np.fromiter(chain.from_iterable(combinations(range(n_points), r)),
                       dtype=np.int64)
    return flat.reshape(-1, r)


@dataclass
class TermGroup:
    """Deductions feeding ``nseg`` target cells, sorted by target."""
    target: np.ndarray
    left: np.ndarray
    right: np.ndarray
    variant: np.ndarray
    split: np.ndarray
    nseg: int

    def __post_init__(self):
        counts = np.bincount(self.target, minlength=self.nseg)
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        self.nonempty = counts > 0
        self.indicator = sparse.csr_matrix(
            (np.ones(len(self.target)), (self.target, np.arange(len(self.target)))),
            shape=(self.nseg, len(self.target)))

    def __len__(self):
        return len(self.target)

    def segmax(self, vals, fill=-np.inf):
        """Per-target max of ``vals`` (rows aligned with the terms)."""
        out = np.full((self.nseg,) + vals.shape[1:], fill, dtype=vals.dtype)
        if len(self.target):
            out[self.nonempty] = np.maximum.reduceat(
                vals, self.starts[self.nonempty], axis=0)
        return out

    def first_argmax(self, vals, best):
        """Index of the first term per target whose value equals ``best``."""
        hit = vals == best[self.target]
        idx = np.flatnonzero(hit)
        tgt, first = np.unique(self.target[idx], return_index=True)
        out = np.full(self.nseg, -1, dtype=np.int64)
        out[tgt] = idx[first]
        return out


def _group(target, left, right, nseg, variant=None, split=None, order=None):
    variant = np.zeros_like(target) if variant is None else variant
    split = np.zeros_like(target) if split is None else split
    keys = order if order is not None else (split, target)
    perm = np.lexsort(keys)
    return TermGroup(target=target[perm], left=left[perm], right=right[perm],
                     variant=variant[perm], split=split[perm], nseg=nseg)


@dataclass
class Layer:
    L: int
    span_rows: np.ndarray       # continuous cells of width L
    cells4: np.ndarray          # fan-out-2 cell ids of yield L
    a3_left: np.ndarray         # rule 1b children, aligned with cells4
    a3_right: np.ndarray
    a4: TermGroup               # rules 2b-2e, targets index cells4
    a1: TermGroup               # rule 1a, targets index span_rows
    a2: TermGroup               # rule 2a, targets index span_rows


@dataclass
class ChartPlan:
    n: int
    cell4: np.ndarray           # [n4, 4] (i, j, m, k)
    id4: np.ndarray             # [N, N, N, N] -> id or -1
    layers: list

    @property
    def N(self):
        return self.n + 1

    @property
    def n4(self):
        return len(self.cell4)

    def row(self, i, j):
        return i * (self.n + 1) + j


@lru_cache(maxsize=8)
def chart_plan(n):
    N = n + 1
    row = lambda i, j: i * N + j  # noqa: E731
    cell4 = _combos(N, 4) if N >= 4 else np.zeros((0, 4), dtype=np.int64)
    id4 = np.full((N, N, N, N), -1, dtype=np.int64)
    if len(cell4):
        id4[cell4[:, 0], cell4[:, 1], cell4[:, 2], cell4[:, 3]] = np.arange(len(cell4))
    y4 = (cell4[:, 1] - cell4[:, 0]) + (cell4[:, 3] - cell4[:, 2])

    c3 = _combos(N, 3) if N >= 3 else np.zeros((0, 3), dtype=np.int64)
    c5 = _combos(N, 5) if N >= 5 else np.zeros((0, 5), dtype=np.int64)

    # rule 1a: (i, k, j)
    i, k, j = c3.T if len(c3) else (np.zeros(0, int),) * 3
    t1 = dict(w=j - i, tgt=row(i, j), left=row(i, k), right=row(k, j), split=k)
    # rule 2a: (i, k, l, j): B [k, l), C [i, k), [l, j)
    if len(cell4):
        i, k, l, j = cell4.T
        t2 = dict(w=j - i, tgt=row(i, j), left=row(k, l), right=id4[i, k, l, j],
                  split=k * N + l)
    else:
        t2 = dict(w=np.zeros(0, int), tgt=np.zeros(0, int), left=np.zeros(0, int),
                  right=np.zeros(0, int), split=np.zeros(0, int))
    # rules 2b-2e over 5-point combinations (a < b < c < d < e)
    if len(c5):
        a, b, c, d, e = c5.T
        tgt = np.concatenate([id4[a, c, d, e], id4[a, c, d, e],
                              id4[a, b, c, e], id4[a, b, c, e]])
        left = np.concatenate([row(a, b), row(b, c), row(c, d), row(d, e)])
        right = np.concatenate([id4[b, c, d, e], id4[a, b, d, e],
                                id4[a, b, d, e], id4[a, b, c, d]])
        var = np.repeat(np.arange(4), len(c5))
        split = np.concatenate([b, b, d, d])
    else:
        tgt = left = right = var = split = np.zeros(0, dtype=np.int64)

    layers = []
    for L in range(1, n + 1):
        span_rows = np.array([row(s, s + L) for s in range(0, n - L + 1)], dtype=np.int64)
        local2 = np.full(N * N, -1, dtype=np.int64)
        local2[span_rows] = np.arange(len(span_rows))
        cells = np.flatnonzero(y4 == L)
        local4 = np.full(len(cell4), -1, dtype=np.int64)
        local4[cells] = np.arange(len(cells))
        ci = cell4[cells]
        a3_left = row(ci[:, 0], ci[:, 1]) if len(ci) else np.zeros(0, np.int64)
        a3_right = row(ci[:, 2], ci[:, 3]) if len(ci) else np.zeros(0, np.int64)

        sel = local4[tgt] >= 0 if len(tgt) else np.zeros(0, bool)
        a4 = _group(local4[tgt[sel]], left[sel], right[sel], len(cells),
                    variant=var[sel], split=split[sel],
                    order=(var[sel], split[sel], local4[tgt[sel]]))
        sel = t1["w"] == L
        a1 = _group(local2[t1["tgt"][sel]], t1["left"][sel], t1["right"][sel],
                    len(span_rows), split=t1["split"][sel])
        sel = t2["w"] == L
        a2 = _group(local2[t2["tgt"][sel]], t2["left"][sel], t2["right"][sel],
                    len(span_rows), split=t2["split"][sel])
        layers.append(Layer(L=L, span_rows=span_rows, cells4=cells,
                            a3_left=a3_left, a3_right=a3_right,
                            a4=a4, a1=a1, a2=a2))
    for arr in (cell4, id4):
        arr.setflags(write=False)
    return ChartPlan(n=n, cell4=cell4, id4=id4, layers=layers)

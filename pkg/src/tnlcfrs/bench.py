"""Wall-clock comparison of the explicit and rank-space inside passes."""
from __future__ import annotations

import time

import numpy as np

from .factored import precompute, random_factored
from .grammar import GrammarDims, materialize
from .oracle import inside_explicit
from .rank import inside_rank

TSV_HEADER = "method\tlength\tmedian_ms\tp95_ms\tcensored\n"


def _summary(method, length, times, censored):
    ms = np.asarray(times) * 1e3
    return {"method": method, "length": length, "median_ms": float(np.median(ms)),
            "p95_ms": float(np.percentile(ms, 95)), "censored": censored}


def time_rank(fg, kernels, sentence, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        inside_rank(kernels, fg, sentence)
        times.append(time.perf_counter() - t0)
    return times


def time_explicit(grammar, sentence, repeats, budget):
    """Run times, or ``([budget], True)`` once a run exceeds ``budget`` seconds."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        try:
            inside_explicit(grammar, sentence, deadline=t0 + budget)
        except TimeoutError:
            return [budget], True
        times.append(time.perf_counter() - t0)
    return times, False


def run_bench(lengths=(10, 20, 30, 40), m1=150, m2=150, p=450, v=1000,
              ranks=(400, 4, 400, 4), repeats=3, budget=60.0, seed=0,
              methods=("rank", "explicit")):
    """Rows of timings; explicit runs that exceed ``budget`` are censored."""
    dims = GrammarDims(m1, m2, p, v)
    fg = random_factored(dims, ranks, seed)
    kernels = precompute(fg)
    grammar = materialize(fg) if "explicit" in methods else None
    rng = np.random.default_rng(seed)
    rows = []
    for n in lengths:
        sentence = rng.integers(0, v, n)
        if "rank" in methods:
            rows.append(_summary("rank", n, time_rank(fg, kernels, sentence, repeats), False))
        if "explicit" in methods:
            times, cut = time_explicit(grammar, sentence, repeats, budget)
            rows.append(_summary("explicit", n, times, cut))
    return rows


def format_rows(rows):
    return TSV_HEADER + "".join(
        f"{r['method']}\t{r['length']}\t{r['median_ms']:.3f}\t{r['p95_ms']:.3f}\t"
        f"{int(r['censored'])}\n" for r in rows)

"""Report figures written next to the CLI's tabular output."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {"figure.figsize": (5.0, 3.4), "axes.grid": True, "grid.alpha": 0.3,
         "axes.spines.top": False, "axes.spines.right": False, "font.size": 9}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curve(history, path):
    """Training NLL and dev perplexity per epoch."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [r.epoch for r in history]
        ax.plot(epochs, [r.train_nll for r in history], "o-", color="tab:blue",
                label="train NLL / sentence")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train NLL", color="tab:blue")
        twin = ax.twinx()
        twin.plot(epochs, [r.dev_ppl for r in history], "s--", color="tab:orange",
                  label="dev perplexity")
        twin.set_ylabel("dev perplexity", color="tab:orange")
        twin.grid(False)
        return _save(fig, path)


def scaling_plot(rows, path):
    """Median inside time against sentence length, one line per method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for method in sorted({r["method"] for r in rows}):
            pts = sorted((r["length"], r["median_ms"]) for r in rows
                         if r["method"] == method and r["median_ms"] == r["median_ms"])
            if pts:
                ax.plot(*zip(*pts), "o-", label=method)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("sentence length")
        ax.set_ylabel("median time (ms)")
        ax.legend()
        return _save(fig, path)


def f1_bars(scores, path):
    """Bar chart of F1 (and DF1 where defined) for the model and baselines."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(scores)
        xs = range(len(names))
        ax.bar([x - 0.2 for x in xs], [scores[n][0] for n in names], width=0.4, label="F1")
        ax.bar([x + 0.2 for x in xs], [scores[n][1] or 0.0 for n in names], width=0.4,
               label="DF1")
        ax.set_xticks(list(xs), names)
        ax.set_ylabel("score")
        ax.set_ylim(0, 100)
        ax.legend()
        return _save(fig, path)

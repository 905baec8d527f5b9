"""Figure rendering for the diagnostics; file format follows the path suffix."""

from __future__ import annotations

import math

from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "attdistill",
}


def _figure(ncols=1, width=3.4, height=None):
    import matplotlib

    matplotlib.rcParams.update(STYLE)
    golden = (math.sqrt(5) - 1) / 2
    height = height or width * golden / max(1, ncols) * 1.2
    fig = Figure(figsize=(width * ncols if ncols > 1 else width, height))
    return fig


def _save(fig, path):
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None, bbox_inches="tight")


def plot_amp_histograms(hists, path):
    """One bar panel per histogram, mismatch counts per interval."""
    fig = _figure(ncols=len(hists), width=2.6, height=2.2)
    axes = fig.subplots(1, len(hists), sharey=True, squeeze=False)[0]
    for ax, h in zip(axes, hists):
        ax.bar(range(len(h.counts)), h.counts, color="0.35", width=0.8)
        if h.counts:
            ax.axhline(sum(h.counts) / len(h.counts), color="C3", lw=1, ls="--")
        ax.set_title(f"N_S={h.n_s}, gamma={h.gamma}")
        ax.set_xlabel(f"interval ({h.interval_size} iters)")
    axes[0].set_ylabel("# mismatched")
    _save(fig, path)


def plot_nopt_traces(traces: dict, path, n_s: int | None = None):
    fig = _figure(width=4.0)
    ax = fig.subplots()
    for label, tr in traces.items():
        ax.plot(tr.iters, tr.selected, lw=0.8, label=label)
    if n_s is not None:
        ax.axhline(n_s, color="0.5", lw=0.8, ls=":")
    ax.set_xlabel("iteration")
    ax.set_ylabel("selected step")
    if len(traces) > 1:
        ax.legend(frameon=False)
    _save(fig, path)


def plot_stability(results, path):
    """Grouped bars of successes per multiplier, one group colour per run label."""
    fig = _figure(width=4.0)
    ax = fig.subplots()
    results = list(results)
    width = 0.8 / max(1, len(results))
    for k, r in enumerate(results):
        xs = [i + k * width for i in range(len(r.multipliers))]
        ax.bar(xs, r.successes, width=width, label=f"{r.mode.upper()} {r.parameter}")
    if results:
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(results[0].multipliers))])
        ax.set_xticklabels([f"x{m:g}" for m in results[0].multipliers])
        ax.set_ylim(0, max(r.repeats for r in results) + 1)
    ax.set_ylabel("# successful runs")
    ax.legend(frameon=False)
    _save(fig, path)

"""Figure emission for report outputs.

Every report stage can render its figures to static files next to the CSVs;
there is no interactive UI.  All functions take an output path and return it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.figsize": (7.0, 4.2),
    "axes.linewidth": 0.6,
    "font.size": 9,
    "axes.grid": True,
    "grid.linewidth": 0.3,
    "grid.alpha": 0.4,
    "savefig.bbox": "tight",
})


def cumulative_events_figure(events, path, label="simulated"):
    """Cumulative successful coordination events over time."""
    fig, ax = plt.subplots()
    if len(events):
        succ = events[events["success"] == 1].groupby("week").size()
        weeks = np.arange(int(events["week"].max()) + 1)
        counts = succ.reindex(weeks, fill_value=0).cumsum()
        ax.step(weeks, counts.to_numpy(), where="post", label=label)
        ax.legend(frameon=False)
    ax.set_xlabel("week")
    ax.set_ylabel("cumulative successful events")
    fig.savefig(path)
    plt.close(fig)
    return path


def welfare_curves_figure(reports, path):
    """Cumulative consumer-loss and profit-gain paths per scenario."""
    fig, axes = plt.subplots(1, 2, figsize=(9.5, 4.0), sharex=True)
    for rep in reports:
        w = rep.weekly
        axes[0].plot(w["week"], w["d_cs_m"].cumsum(), label=rep.label)
        axes[1].plot(w["week"], w["d_ps_m"].cumsum(), label=rep.label)
    axes[0].set_title("cumulative consumer surplus change (CLP m)")
    axes[1].set_title("cumulative profit change (CLP m)")
    for ax in axes:
        ax.set_xlabel("week")
    axes[0].legend(frameon=False, fontsize=7)
    fig.savefig(path)
    plt.close(fig)
    return path


def price_path_figure(reports, path):
    """Average simulated price paths per scenario."""
    fig, ax = plt.subplots()
    for rep in reports:
        ax.plot(rep.weekly["week"], rep.weekly["mean_price"], label=rep.label)
    ax.set_xlabel("week")
    ax.set_ylabel("mean price (CLP)")
    ax.legend(frameon=False, fontsize=7)
    fig.savefig(path)
    plt.close(fig)
    return path


def elasticity_histogram(report_frame, path):
    """Own-elasticity distributions by demand regime."""
    fig, ax = plt.subplots()
    for period, g in report_frame.groupby("period"):
        ax.hist(g["own_elasticity"], bins=40, alpha=0.55, label=str(period))
    ax.set_xlabel("own-price elasticity")
    ax.set_ylabel("products")
    ax.legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)
    return path


def tier_ladder_figure(panel, drug_id, path):
    """Weekly price paths of one drug across firms."""
    fig, ax = plt.subplots()
    g = panel.frame[panel.frame["drug_id"] == drug_id]
    for firm, gf in g.groupby("firm"):
        ax.plot(gf["week"], gf["price_clp"], label=firm, lw=0.9)
    ax.axvline(panel.period_break, color="k", ls="--", lw=0.6)
    ax.set_xlabel("week")
    ax.set_ylabel("price (CLP)")
    ax.set_title(str(drug_id))
    ax.legend(frameon=False, fontsize=7)
    fig.savefig(path)
    plt.close(fig)
    return path

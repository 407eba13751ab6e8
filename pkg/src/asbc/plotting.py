"""Figures for the ``report`` command, rendered from plot-data tables."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}

# golden-ratio panel, 3.4 in wide
PANEL = (3.4, 3.4 * (np.sqrt(5) - 1) / 2)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def convergence(df: pd.DataFrame, path) -> Path:
    """Hold-out NLL per round; one line per run when a ``run`` column is present."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=PANEL)
        groups = df.groupby("run") if "run" in df.columns else [("", df)]
        for name, g in groups:
            ax.plot(g["round"], g["holdout_nll"], marker="o", ms=3, lw=1.2, label=str(name) or None)
        ax.set_xlabel("round")
        ax.set_ylabel("hold-out NLL")
        ax.xaxis.get_major_locator().set_params(integer=True)
        if "run" in df.columns:
            ax.legend(frameon=False)
        return _save(fig, path)


def error_distribution(long: pd.DataFrame, path) -> Path:
    """Box plots of per-window RMSE and ES, one panel per metric family."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(2 * PANEL[0], PANEL[1]))
        for ax, fam in zip(axes, ("rmse", "es")):
            sub = long[long["metric"].str.startswith(fam + "_")]
            names = sorted(sub["metric"].unique())
            ax.boxplot([sub.loc[sub["metric"] == n, "value"].to_numpy() for n in names],
                       showfliers=False)
            ax.set_xticks(range(1, len(names) + 1), [n.split("_", 1)[1] for n in names])
            ax.set_title(fam.upper())
        return _save(fig, path)


def ablation(table: pd.DataFrame, path, metric: str = "holdout_nll") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=PANEL)
        for i, (v, g) in enumerate(table.groupby("variant", sort=False)):
            ax.scatter(np.full(len(g), i), g[metric], s=12)
            ax.hlines(g[metric].median(), i - 0.25, i + 0.25, color="k", lw=1)
        ax.set_xticks(range(table["variant"].nunique()), list(dict.fromkeys(table["variant"])))
        ax.set_ylabel(metric.replace("_", " "))
        return _save(fig, path)


def prediction_band(t: np.ndarray, truth: np.ndarray, lo: np.ndarray, hi: np.ndarray, mean: np.ndarray,
                    path, ylabel: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=PANEL)
        ax.fill_between(t, lo, hi, alpha=0.3, lw=0, label="95% PI")
        ax.plot(t, mean, lw=1.2, label="predictive mean")
        ax.plot(t, truth, "k--", lw=1, label="observed")
        ax.set_xlabel("time (s)")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        return _save(fig, path)

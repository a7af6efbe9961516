"""Figures rendered next to the CSV outputs.

Uses the non-interactive Agg backend so runs work headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .conformal import IntervalBand  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "font.size": 9,
}


def _centers(lo, hi):
    return (np.asarray(lo) + np.asarray(hi)) / 2


def plot_conditional_coverage(bins, alpha: float, path) -> Path:
    """Trial-averaged coverage and width per x-bin, one line per method.

    ``bins`` is a sequence of records with ``method``, ``bin_lo``, ``bin_hi``,
    ``coverage`` and ``mean_width``.
    """
    methods = list(dict.fromkeys(b.method for b in bins))
    with plt.rc_context(STYLE):
        fig, (ax_c, ax_w) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 6.0))
        for m in methods:
            mine = [b for b in bins if b.method == m]
            x = _centers([b.bin_lo for b in mine], [b.bin_hi for b in mine])
            ax_c.plot(x, [b.coverage for b in mine], marker="o", ms=3, label=m)
            ax_w.plot(x, [b.mean_width for b in mine], marker="o", ms=3, label=m)
        ax_c.axhline(1 - alpha, color="k", lw=0.8, ls="--")
        ax_c.set_ylabel("conditional coverage")
        ax_w.set_ylabel("mean width")
        ax_w.set_yscale("log")
        ax_w.set_xlabel("x")
        ax_c.legend(ncol=2, fontsize=8)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_bands(x, y, bands: dict[str, IntervalBand], path, oracle: IntervalBand | None = None,
               ylim=(-3.0, 3.0)) -> Path:
    """Prediction bands of each method against x for one trial."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x)
    n = len(bands)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 1, sharex=True, figsize=(6.4, 1.8 * n + 0.6), squeeze=False)
        for ax, (name, band) in zip(axes[:, 0], bands.items()):
            ax.scatter(x, y, s=4, c="0.4", lw=0)
            ax.fill_between(x[order], np.clip(band.lower[order], *ylim), np.clip(band.upper[order], *ylim),
                            alpha=0.35, step="mid")
            if oracle is not None:
                ax.plot(x[order], oracle.lower[order], "k--", lw=0.8)
                ax.plot(x[order], oracle.upper[order], "k--", lw=0.8)
            ax.set_ylim(*ylim)
            ax.set_title(name, loc="left", fontsize=9)
        axes[-1, 0].set_xlabel("x")
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_method_summary(summary, path) -> Path:
    """Mean coverage and mean interval score loss per method, with standard errors."""
    names = [s.method for s in summary]
    pos = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, (ax_c, ax_i) = plt.subplots(1, 2, figsize=(8.0, 3.4))
        ax_c.errorbar(pos, [s.coverage for s in summary], yerr=[s.coverage_se for s in summary], fmt="o")
        ax_i.errorbar(pos, [s.mean_isl for s in summary], yerr=[s.mean_isl_se for s in summary], fmt="o")
        for ax, label in ((ax_c, "coverage"), (ax_i, "interval score loss")):
            ax.set_xticks(pos, names, rotation=45, ha="right")
            ax.set_ylabel(label)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path

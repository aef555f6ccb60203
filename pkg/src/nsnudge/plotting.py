"""Figures written next to the CSV output of each command."""

from __future__ import annotations

from contextlib import contextmanager

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "figure.figsize": (6.0, 3.7),
}


@contextmanager
def figure(path):
    with matplotlib.rc_context(RC):
        fig, ax = plt.subplots()
        try:
            yield fig, ax
            fig.tight_layout()
            fig.savefig(path)
        finally:
            plt.close(fig)


def plot_energy(log: np.ndarray, path) -> None:
    with figure(path) as (fig, ax):
        ax.plot(log[:, 0], log[:, 1], label=r"$|U|$")
        ax.plot(log[:, 0], log[:, 2], label=r"$\|U\|$")
        ax.set_xlabel("t")
        ax.legend()


def plot_error_series(series, path, title: str = "") -> None:
    with figure(path) as (fig, ax):
        ax.semilogy(series.t, series.w_h1_sq, label=r"$\|U-u\|^2$")
        ax.semilogy(series.t, series.w_l2_sq, label=r"$|U-u|^2$", alpha=0.7)
        hits = series.clipped
        if hits.any():
            ax.plot(series.t[hits], series.w_h1_sq[hits], "rx", label="clipped")
        ax.set_xlabel("t")
        ax.set_title(title)
        ax.legend()


def plot_ensemble(stats_by_label: dict, path) -> None:
    """Ensemble mean with shaded I_p bands, one colour per noise level."""
    with figure(path) as (fig, ax):
        colours = plt.cm.viridis(np.linspace(0.0, 0.85, max(1, len(stats_by_label))))
        for colour, (label, stats) in zip(colours, stats_by_label.items()):
            for p, (a, b) in sorted(stats.bands.items(), reverse=True):
                ax.fill_between(stats.times, a, b, color=colour, alpha=0.12 + 0.1 * (1 - p), lw=0)
            ax.semilogy(stats.times, stats.mean_sq_error, color=colour, label=label)
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel(r"$E\,\|U-u\|^2$")
        ax.legend()


def plot_scaling(table: np.ndarray, path, slope: float | None = None) -> None:
    """Columns of ``table``: sigma_sq, max, avg, min."""
    with figure(path) as (fig, ax):
        s = table[:, 0]
        for col, name, marker in ((1, "max", "^"), (2, "avg", "o"), (3, "min", "v")):
            ax.loglog(s, table[:, col], marker=marker, label=name)
        ref = table[:, 2][0] * s / s[0]
        ax.loglog(s, ref, "k--", lw=0.8, label=r"$\propto\sigma^2$")
        ax.set_xlabel(r"$\sigma^2$")
        ax.set_ylabel(r"$E\,\|U-u\|^2$")
        if slope is not None:
            ax.set_title(f"log-log slope of avg: {slope:.3f}")
        ax.legend()


def plot_sync(results: dict, path) -> None:
    """Relative error ||w||^2/||U||^2 for each relaxation parameter."""
    with figure(path) as (fig, ax):
        for mu, (t, ratio) in results.items():
            ax.semilogy(t, np.maximum(ratio, 1e-300), label=f"mu = {mu:g}")
        ax.set_xlabel("t")
        ax.set_ylabel(r"$\|U-u\|^2/\|U\|^2$")
        ax.legend()

"""Figure rendering for experiment reports.

Figures are written next to the delimited output; the CSV remains the
machine-readable contract and every figure is derived from the same rows.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_experiment_figures(rows: list, out_dir) -> list:
    """Summary plots for a grid run: recovery quality and counts vs noise.

    One column of axes per noise kind; pipeline and baseline curves share
    axes so the degradation contrast is visible at a glance.  Returns the
    paths written.
    """
    out_dir = Path(out_dir)
    noises = sorted({r["noise"] for r in rows})
    algos = sorted({r["algo"] for r in rows})
    fig, axes = plt.subplots(
        2, len(noises), figsize=(4.2 * len(noises), 6.4), squeeze=False, sharex="col"
    )
    for col, noise in enumerate(noises):
        ax_corr, ax_rec = axes[0][col], axes[1][col]
        for algo in algos:
            sub = [r for r in rows if r["noise"] == noise and r["algo"] == algo]
            eps_values = sorted({r["eps"] for r in sub})
            min_corr = [
                np.mean([r["min_corr2"] for r in sub if r["eps"] == e])
                for e in eps_values
            ]
            recovered = [
                np.mean([r["recovered"] for r in sub if r["eps"] == e])
                for e in eps_values
            ]
            ax_corr.plot(eps_values, min_corr, marker="o", label=algo)
            ax_rec.plot(eps_values, recovered, marker="s", label=algo)
        ax_corr.set_title(noise)
        ax_corr.set_ylabel("min corr$^2$")
        ax_corr.set_ylim(-0.05, 1.05)
        ax_rec.set_ylabel("components recovered")
        ax_rec.set_xlabel(r"$\epsilon$")
        ax_corr.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "summary.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]


def render_spectrum(values, path, eps: float = None) -> Path:
    """Eigenvalue profile of a square unfolding, to guide the choice of eps."""
    path = Path(path)
    values = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(np.arange(1, len(values) + 1), values, marker=".", lw=1)
    if eps is not None:
        ax.axhline(eps, color="crimson", ls="--", lw=1, label=rf"$\epsilon$ = {eps:g}")
        ax.legend(fontsize=8)
    ax.set_xlabel("rank")
    ax.set_ylabel("eigenvalue")
    ax.set_title("square unfolding spectrum")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path

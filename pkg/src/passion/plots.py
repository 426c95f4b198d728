"""Figures written next to the CSV reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def figsize(width=5.0):
    golden = (math.sqrt(5) - 1.0) / 2.0
    return width, width * golden


def _series(rows):
    """Group RP-log rows into ``{modality: (epochs, mean_RP)}``."""
    out = {}
    for r in rows:
        e, rp = out.setdefault(int(r["modality"]), ([], []))
        e.append(int(r["epoch"]))
        rp.append(float(r["mean_RP"]))
    return out


def rp_figure(rows, title=None):
    """One epoch-mean RP curve per modality, with the balancing line at 0."""
    rows = list(rows)
    if not rows:
        raise ValueError("RP log is empty")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        ax.axhline(0.0, color="0.5", lw=0.8, ls="--", label="_zero")
        for m, (epochs, rp) in sorted(_series(rows).items()):
            ax.plot(epochs, rp, marker="o", ms=2, lw=1.2, label=f"modality {m}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean relative preference")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
    return fig


def emit_rp_plot(rows, path, title=None) -> Path:
    fig = rp_figure(rows, title)
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def dice_figure(report, title=None):
    """Grouped bars of Dice per modality subset and region."""
    from .metrics import subset_name

    names = [subset_name(s, report.n_modalities) for s in report.subsets]
    x = np.arange(len(names))
    n = len(report.regions)
    w = 0.8 / n
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(6.0))
        for j, r in enumerate(report.regions):
            ax.bar(x + (j - (n - 1) / 2) * w, [report.dice[(s, r)] for s in report.subsets], w, label=r)
        ax.set_xticks(x, names)
        ax.set_xlabel("available modalities")
        ax.set_ylabel("Dice")
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, ncol=n)
        fig.tight_layout()
    return fig


def emit_dice_plot(report, path, title=None) -> Path:
    fig = dice_figure(report, title)
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path

"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def new_figure(width: float = 4.0, height: float | None = None):
    golden = (5**0.5 - 1) / 2
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, height or width * golden), constrained_layout=True)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_roc(curves: dict[str, list], path, aucs: dict[str, float] | None = None) -> Path:
    """One line per run; ``curves`` maps a label to ``(fpr, tpr, threshold)`` points."""
    with plt.rc_context(RC):
        fig, ax = new_figure(3.6, 3.4)
        ax.plot([0, 1], [0, 1], color="0.75", lw=0.8, ls="--")
        for label, pts in curves.items():
            name = label if not aucs or label not in aucs else f"{label} (AUC {aucs[label]:.3f})"
            ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1.4, drawstyle="default", label=name)
        ax.set_xlim(-0.01, 1.01)
        ax.set_ylim(-0.01, 1.01)
        ax.set_xlabel("false positive rate (1 - specificity)")
        ax.set_ylabel("true positive rate (sensitivity)")
        ax.legend(loc="lower right", frameon=False)
        return save(fig, path)


def plot_loss_log(log_csv, path) -> Path:
    with open(log_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with plt.rc_context(RC):
        fig, ax = new_figure(5.0)
        if rows:
            it = [int(r["iteration"]) for r in rows]
            for col in ("pclsloss", "pregloss", "tlloss", "clsloss", "regloss", "simloss", "total"):
                vals = [float(r[col]) for r in rows]
                if any(vals):
                    ax.plot(it, vals, lw=1.0, label=col)
            ax.set_yscale("log")
            ax.legend(ncol=2, frameon=False)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss (window mean)")
        return save(fig, path)

"""Figure rendering for experiment reports (headless, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_residual_history(history, path, label=None) -> None:
    """Semilogarithmic residual-per-iteration curve."""
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.semilogy(np.arange(len(history)), np.maximum(history, 1e-300),
                marker="o", markersize=3, lw=1.2, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative residual")
    ax.grid(True, which="both", alpha=0.3)
    if label:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_residual_comparison(histories, path) -> None:
    """Overlayed residual curves; ``histories`` maps label -> history."""
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for label, history in histories.items():
        ax.semilogy(np.arange(len(history)), np.maximum(history, 1e-300),
                    marker="o", markersize=3, lw=1.2, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative residual")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_quality_histograms(level_reports, path) -> None:
    """Per-level histograms of the normalised radius ratio.

    ``level_reports`` is a sequence of (level index, QualityReport).
    """
    n = max(1, len(level_reports))
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.0), squeeze=False)
    for ax, (level, report) in zip(axes[0], level_reports):
        centers = 0.5 * (report.bin_edges[:-1] + report.bin_edges[1:])
        width = report.bin_edges[1] - report.bin_edges[0]
        ax.bar(centers, report.histogram, width=0.9 * width)
        ax.set_title(f"level {level}")
        ax.set_xlabel("radius ratio")
        ax.set_xlim(0.0, 1.0)
    axes[0][0].set_ylabel("cells")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)

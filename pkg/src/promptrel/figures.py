"""Rendered figures for the report stage: the elbow curve and the
confusion-matrix heatmap, written as PNG files next to the delimited
outputs.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def elbow_figure(curve, path):
    """Raw and smoothed silhouette against k, with the selected k marked."""
    fig, ax = plt.subplots(figsize=(7.0, 4.5), dpi=120)
    ax.plot(
        curve.k_values, curve.silhouette_raw,
        "o", markersize=3.5, color="#6b7fb3", label="silhouette",
    )
    ax.plot(
        curve.k_values, curve.silhouette_smoothed,
        "-", linewidth=1.8, color="#c23b22", label="smoothed",
    )
    ax.axvline(curve.k_hat, linestyle="--", linewidth=1.0, color="#555555")
    ax.annotate(
        f"selected k = {curve.k_hat}",
        xy=(curve.k_hat, max(curve.silhouette_smoothed)),
        xytext=(5, 5), textcoords="offset points", fontsize=9,
    )
    ax.set_xlabel("number of clusters k")
    ax.set_ylabel("silhouette coefficient")
    ax.legend(loc="best", fontsize=9)
    ax.grid(alpha=0.3, linewidth=0.5)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def confusion_figure(matrix, path):
    """Heatmap of the (diagonalized) cluster-vs-gold counts matrix."""
    counts = np.asarray(matrix.counts, dtype=float)
    rows, cols = counts.shape
    fig, ax = plt.subplots(
        figsize=(max(5.0, min(12.0, 0.25 * cols + 2)),
                 max(4.0, min(12.0, 0.25 * rows + 2))),
        dpi=120,
    )
    image = ax.imshow(counts, cmap="viridis", aspect="auto", interpolation="nearest")
    fig.colorbar(image, ax=ax, label="instances")
    ax.set_xlabel("gold relation")
    ax.set_ylabel("cluster")
    if cols <= 30:
        ax.set_xticks(range(cols))
        ax.set_xticklabels(matrix.col_labels, rotation=90, fontsize=6)
    if rows <= 30:
        ax.set_yticks(range(rows))
        ax.set_yticklabels([f"c-{r}" for r in matrix.row_ids], fontsize=6)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

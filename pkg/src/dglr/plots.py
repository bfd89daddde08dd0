"""Figure rendering for run reports.

Every report path writes figures next to its delimited output: training
emits the loss curves, evaluation emits actual-vs-predicted series panels,
and the ablation sweep emits a metric comparison chart.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

MAX_PANELS = 25


def render_loss_curves(log, out_path) -> None:
    """Per-epoch loss components on a log scale."""
    epochs = np.arange(len(log))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    series = {
        "prediction (stsm)": [r.stsm for r in log],
        "graph closeness (gc)": [r.gc for r in log],
        "feature smoothness (fs)": [r.fs for r in log],
        "target smoothness (ts)": [r.ts for r in log],
        "weighted total": [r.total for r in log],
    }
    for name, values in series.items():
        values = np.asarray(values, dtype=float)
        if np.all(values == 0.0):
            continue
        ax.plot(epochs, values, label=name, linewidth=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_series_panels(times, actual, mask, predicted, out_path) -> None:
    """Actual vs. predicted series, one panel per location (capped)."""
    times = np.asarray(times)
    actual = np.asarray(actual, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    predicted = np.asarray(predicted, dtype=float)
    n = actual.shape[1]
    panels = min(n, MAX_PANELS)
    cols = min(4, panels)
    rows = int(np.ceil(panels / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.4 * rows), squeeze=False)
    for i in range(panels):
        ax = axes[i // cols][i % cols]
        shown = np.where(mask[:, i], actual[:, i], np.nan)
        ax.plot(times, shown, label="actual", color="tab:blue", linewidth=1.2)
        ax.plot(times, predicted[:, i], label="predicted", color="tab:orange", linewidth=1.2, linestyle="--")
        ax.set_title(f"location {i}", fontsize=8)
        ax.tick_params(labelsize=7)
    for j in range(panels, rows * cols):
        axes[j // cols][j % cols].axis("off")
    handles, labels = axes[0][0].get_legend_handles_labels()
    fig.legend(handles, labels, loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_ablation_chart(table, out_path) -> None:
    """Grouped bars of RMSE and SMAPE per ablation variant.

    ``table`` is a list of (variant, rmse, smape, pearson) rows.
    """
    variants = [row[0] for row in table]
    rmse = [row[1] for row in table]
    smape = [row[2] for row in table]
    x = np.arange(len(variants))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.bar(x, rmse, color="tab:blue")
    ax1.set_xticks(x, variants, rotation=20, fontsize=8)
    ax1.set_title("test RMSE")
    ax2.bar(x, smape, color="tab:orange")
    ax2.set_xticks(x, variants, rotation=20, fontsize=8)
    ax2.set_title("test SMAPE %")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

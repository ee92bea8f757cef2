"""Report figures rendered next to the delimited outputs.

Evaluation writes per-metric box plots, ranking writes a mean-rank chart,
and the voxel-wise map command writes axial montages of each map. Everything
uses the Agg backend so the CLI works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import METRIC_NAMES, MetricRecord
from .ranking import RankingTable
from .volume import Volume

_METRIC_LABELS = {
    "dsc": "DSC",
    "avd": "AVD (ml)",
    "ald": "ALD",
    "f1": "lesion F1",
    "hd95": "HD95 (mm)",
}


def metric_boxplots(records: list[MetricRecord], out_path: str | Path) -> Path:
    """One panel per metric, one box per model (median/IQR focus)."""
    out_path = Path(out_path)
    model_ids = sorted({r.model_id for r in records})
    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(3.2 * len(METRIC_NAMES), 3.6))
    for ax, metric in zip(np.atleast_1d(axes), METRIC_NAMES):
        data = [
            [r.value(metric) for r in records if r.model_id == mid] for mid in model_ids
        ]
        ax.boxplot(data, tick_labels=model_ids, showfliers=False)
        ax.set_title(_METRIC_LABELS[metric])
        ax.tick_params(axis="x", rotation=45)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def mean_rank_chart(table: RankingTable, out_path: str | Path) -> Path:
    """Horizontal bars of overall mean rank, best model on top."""
    out_path = Path(out_path)
    models = table.ordered_models()
    values = [table.overall[m] for m in models]
    fig, ax = plt.subplots(figsize=(6.0, 0.5 * len(models) + 1.5))
    ax.barh(range(len(models)), values, color="steelblue")
    ax.set_yticks(range(len(models)), models)
    ax.invert_yaxis()
    ax.set_xlabel("overall mean rank (lower is better)")
    for i, v in enumerate(values):
        ax.text(v, i, f" {v:.2f}", va="center")
    ax.grid(alpha=0.3, axis="x")
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def map_montage(vol: Volume, out_path: str | Path, title: str = "", cmap: str = "hot") -> Path:
    """Axial slice montage of one voxel-wise map with a shared color scale."""
    out_path = Path(out_path)
    n_slices = vol.grid.shape[2]
    cols = min(n_slices, 8)
    rows = int(np.ceil(n_slices / cols))
    vmax = float(vol.data.max()) or 1.0
    fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.2 * rows))
    axes = np.atleast_1d(axes).ravel()
    im = None
    for k in range(len(axes)):
        axes[k].axis("off")
        if k < n_slices:
            im = axes[k].imshow(vol.data[:, :, k].T, origin="lower", cmap=cmap, vmin=0.0, vmax=vmax)
            axes[k].set_title(f"z={k}", fontsize=8)
    if title:
        fig.suptitle(title)
    if im is not None:
        fig.colorbar(im, ax=list(axes), shrink=0.7)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path

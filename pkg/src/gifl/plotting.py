"""Report figures written next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

METRIC_COLORS = {"f1": "#1b9e77", "iou": "#d95f02", "acc": "#7570b3", "auc": "#e7298a"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # drop the version stamp so reruns produce the same bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(rows: Sequence[Sequence[float]], path, title: str = "training loss") -> Path:
    """Rows are ``(step, total, l2, bce, iou)``."""
    arr = np.asarray(rows, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for col, name in enumerate(("total", "l2", "bce", "iou"), start=1):
            ax.plot(arr[:, 0], arr[:, col], lw=1.2 if name == "total" else 0.8, label=name)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False, ncol=4)
        fig.tight_layout()
        return _save(fig, path)


def metric_bars(aggregates: Mapping[str, Mapping[str, float]], path, authentic: Optional[Mapping] = None) -> Path:
    """Grouped bars of F1/IoU/ACC/AUC per method tag."""
    methods = list(aggregates)
    keys = ("f1", "iou", "acc", "auc")
    x = np.arange(len(methods))
    width = 0.2
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(methods) + 2), 3))
        for k, key in enumerate(keys):
            vals = [aggregates[m][key] for m in methods]
            ax.bar(x + (k - 1.5) * width, np.nan_to_num(vals), width, label=key.upper(), color=METRIC_COLORS[key])
        ax.set_xticks(x)
        ax.set_xticklabels(methods, rotation=20, ha="right")
        ax.set_ylim(0, 1.05)
        title = "pixel-level metrics"
        if authentic:
            title += f"  (authentic p-ACC {authentic['p_acc']:.4f}, i-ACC {authentic['i_acc']:.4f})"
        ax.set_title(title, pad=18)
        ax.legend(frameon=False, ncol=4, loc="lower center", bbox_to_anchor=(0.5, 1.0), borderaxespad=0.2)
        fig.tight_layout()
        return _save(fig, path)


def mask_ratio_hist(ratios: Dict[str, Sequence[float]], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        bins = np.linspace(0, 1, 41)
        for split, vals in ratios.items():
            if len(vals):
                ax.hist(vals, bins=bins, alpha=0.6, label=f"{split} (n={len(vals)})")
        ax.set_xlabel("mask ratio")
        ax.set_ylabel("count")
        ax.set_title("forgery region statistics")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def prediction_panel(img: np.ndarray, prob: np.ndarray, path, gt: Optional[np.ndarray] = None) -> Path:
    panels = [("image", img), ("probability", prob), ("mask", prob >= 0.5)]
    if gt is not None:
        panels.append(("ground truth", gt))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4))
        for ax, (name, data) in zip(axes, panels):
            ax.imshow(data, cmap=None if data.ndim == 3 else "gray", vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(name)
            ax.axis("off")
        fig.tight_layout()
        return _save(fig, path)


def param_breakdown(breakdown: Mapping[str, int], path, title: str) -> Path:
    names = list(breakdown)
    vals = np.array([breakdown[n] for n in names], dtype=np.float64) / 1e6
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 0.4 * len(names) + 1))
        ax.barh(names, vals, color="#66a61e")
        for y, v in enumerate(vals):
            ax.text(v, y, f" {v:.1f} M", va="center", fontsize=7)
        ax.set_xlabel("parameters (M)")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)

"""Static plot artifacts: loss curves, comparison bars, montages, traces."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def save_loss_curves(record, path, title: str = "training loss") -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    keys = sorted({k for epoch in record.loss_history for k in epoch})
    for key in keys:
        ax1.plot([epoch.get(key, np.nan) for epoch in record.loss_history], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=7)
    ax1.set_title(title)
    vd = [v if v is not None else np.nan for v in record.val_dice]
    ax2.plot(vd, color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation Dice")
    ax2.set_ylim(0, 1)
    ax2.set_title("validation overlap")
    return _save(fig, path)


def save_comparison_plot(result, path) -> Path:
    methods = []
    for row in result.rows:
        if row.method not in methods:
            methods.append(row.method)
    phases = ("before", "after", "single")
    colors = {"before": "tab:blue", "after": "tab:orange", "single": "tab:gray"}
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.4))
    width = 0.38
    for ax, metric in ((ax1, "dice"), (ax2, "asd")):
        for i, method in enumerate(methods):
            for phase in phases:
                matching = [r for r in result.rows if r.method == method and r.phase == phase]
                if not matching:
                    continue
                row = matching[0]
                mean = getattr(row, f"{metric}_mean")
                std = getattr(row, f"{metric}_std")
                offset = {"before": -width / 2, "after": width / 2, "single": 0.0}[phase]
                ax.bar(i + offset, mean, width=width if phase != "single" else 2 * width,
                       yerr=std, color=colors[phase], capsize=2,
                       label=phase if i == 0 else None)
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=20, fontsize=8)
        ax.set_title(metric.upper() if metric == "asd" else "Dice")
    ax1.set_ylim(0, 1)
    ax1.legend(fontsize=7)
    return _save(fig, path)


def save_montage(snapshots, path, title: str = "representation over training") -> Path:
    """Row of images showing how the learned representation evolves."""
    if not snapshots:
        raise ValueError("no snapshots to plot")
    n = len(snapshots)
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.9))
    if n == 1:
        axes = [axes]
    for ax, (epoch, arr) in zip(axes, snapshots):
        ax.imshow(arr, cmap="gray")
        ax.set_title(f"epoch {epoch}", fontsize=7)
        ax.axis("off")
    fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def save_refine_trace(trace, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(trace.losses)
    ax.set_xlabel("iteration")
    ax.set_ylabel("refinement loss")
    ax.set_yscale("log")
    ax.set_title(f"converged={trace.converged} iters={trace.iterations_run}")
    return _save(fig, path)


def save_sample_preview(sample, path) -> Path:
    panels = [("M", sample.M), ("F", sample.F), ("S_M", sample.S_M), ("S_F", sample.S_F)]
    panels = [(name, img) for name, img in panels if img is not None]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4))
    for ax, (name, img) in zip(np.atleast_1d(axes), panels):
        ax.imshow(img.data.numpy(), cmap="gray", vmin=min(0.0, float(img.data.min())), vmax=1.0)
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    return _save(fig, path)

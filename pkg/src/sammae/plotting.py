"""Matplotlib figures written next to the run's JSON/CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curves(metrics: list[dict], path, title: str = "") -> Path:
    """Reconstruction and classification loss per epoch on twin axes."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ep = [m["epoch"] for m in metrics]
        handles = []
        if "l_con" in metrics[0]:
            handles += ax.plot(ep, [m["l_con"] for m in metrics], color="tab:blue", label="con loss")
            ax.set_ylabel("reconstruction loss")
            ax2 = ax.twinx()
            ax2.spines["right"].set_visible(True)
        else:
            ax2 = ax
        handles += ax2.plot(ep, [m["l_cls"] for m in metrics], color="tab:red", label="cls loss")
        ax2.set_ylabel("classification loss")
        ax.set_xlabel("epoch")
        if title:
            ax.set_title(title)
        ax.legend(handles=handles, loc="upper right", frameon=False)
        return _save(fig, path)


def plot_accuracy(metrics: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ep = [m["epoch"] for m in metrics]
        ax.plot(ep, [m["train_acc"] for m in metrics], label="train (masked pass)")
        if "val_acc" in metrics[0]:
            ax.plot(ep, [m["val_acc"] for m in metrics], label="val (all tokens)")
        ax.set_xlabel("epoch")
        ax.set_ylabel("top-1 accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_flops_sweep(rows: list[dict], path) -> Path:
    """Heatmap of GFLOPs over the (mask ratio, throw ratio) grid."""
    rs = sorted({r["mask_ratio"] for r in rows})
    ts = sorted({r["throw_ratio"] for r in rows})
    grid = np.full((len(ts), len(rs)), np.nan)
    for r in rows:
        grid[ts.index(r["throw_ratio"]), rs.index(r["mask_ratio"])] = r["gflops"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.4))
        im = ax.imshow(grid, origin="lower", cmap="viridis", aspect="auto",
                       extent=(rs[0], rs[-1], ts[0], ts[-1]) if len(rs) > 1 and len(ts) > 1 else None)
        fig.colorbar(im, ax=ax, label="encoder GFLOPs")
        ax.set_xlabel("mask ratio")
        ax.set_ylabel("throw ratio")
        return _save(fig, path)


def plot_mask_grid(images, pixel_maps, partition_images, path, titles=None) -> Path:
    """One row per image: input, weight heatmap, partition."""
    n = len(images)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 3, figsize=(5.4, 1.8 * n), squeeze=False)
        for i in range(n):
            axes[i, 0].imshow(images[i])
            axes[i, 1].imshow(pixel_maps[i], cmap="jet", vmin=0, vmax=1)
            axes[i, 2].imshow(partition_images[i])
            if titles:
                axes[i, 0].set_ylabel(titles[i], fontsize=7)
        for ax, head in zip(axes[0], ("input", "masking weight", "mask / throw")):
            ax.set_title(head)
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)


def plot_weight_comparison(images, maps_by_run: dict, path) -> Path:
    """Input next to each run's weight map (e.g. attention-only vs supervised)."""
    names = list(maps_by_run)
    n = len(images)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 1 + len(names), figsize=(1.8 * (1 + len(names)), 1.8 * n), squeeze=False)
        for i in range(n):
            axes[i, 0].imshow(images[i])
            for j, name in enumerate(names):
                axes[i, j + 1].imshow(images[i])
                axes[i, j + 1].imshow(maps_by_run[name][i], cmap="jet", alpha=0.5, vmin=0, vmax=1)
        axes[0, 0].set_title("input")
        for j, name in enumerate(names):
            axes[0, j + 1].set_title(name)
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)

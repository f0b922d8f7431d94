"""Matplotlib renderings written next to the delimited report files."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import ClassSchema


def save_loss_curves(history, path: str) -> None:
    """Loss components over steps, log-scaled y."""
    steps = [r.step for r in history]
    fig, ax = plt.subplots(figsize=(7, 4), dpi=110)
    ax.plot(steps, [r.total for r in history], label="total", color="black")
    ax.plot(
        steps,
        [r.class_loss for r in history],
        label="class",
        color="tab:orange",
    )
    depth_steps = [r.step for r in history if r.depth_loss is not None]
    if depth_steps:
        ax.plot(
            depth_steps,
            [r.depth_loss for r in history if r.depth_loss is not None],
            label="depth",
            color="tab:blue",
        )
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_confusion_heatmap(matrix: np.ndarray, path: str, schema=None) -> None:
    """Row-normalized confusion matrix with class names on both axes."""
    schema = schema or ClassSchema()
    counts = np.asarray(matrix, dtype=np.float64)
    row_sums = counts.sum(axis=1, keepdims=True)
    shares = np.divide(counts, np.maximum(row_sums, 1.0))
    fig, ax = plt.subplots(figsize=(6.5, 5.5), dpi=110)
    im = ax.imshow(shares, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(schema.names)))
    ax.set_yticks(range(len(schema.names)))
    ax.set_xticklabels(schema.names, rotation=45, ha="right")
    ax.set_yticklabels(schema.names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    for i in range(shares.shape[0]):
        for j in range(shares.shape[1]):
            ax.text(
                j,
                i,
                "%.2f" % shares[i, j],
                ha="center",
                va="center",
                fontsize=7,
                color="white" if shares[i, j] < 0.5 else "black",
            )
    fig.colorbar(im, ax=ax, label="share of actual class")
    ax.set_title("confusion matrix (row-normalized)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_ablation_chart(table, path: str) -> None:
    """Grouped bars: mIoU per toggle combination, one group per seed."""
    seeds = sorted({r.seed for r in table.rows})
    combos = [(False, False), (True, False), (False, True), (True, True)]
    labels = ["none", "adapter", "prompter", "both"]
    width = 0.2
    fig, ax = plt.subplots(figsize=(7, 4), dpi=110)
    xs = np.arange(len(seeds))
    for k, (adapter_on, prompter_on) in enumerate(combos):
        values = [
            table.row(seed, adapter_on, prompter_on).miou for seed in seeds
        ]
        ax.bar(xs + (k - 1.5) * width, values, width, label=labels[k])
    ax.set_xticks(xs)
    ax.set_xticklabels(["seed %d" % s for s in seeds])
    ax.set_ylabel("mIoU")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.set_title("ablation: module toggles vs mIoU")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

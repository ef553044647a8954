"""Matplotlib renderings of the JSON/CSV reports the CLI writes."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(log_rows, path):
    """Total loss, component losses and learning rate by epoch."""
    epochs = [r["epoch"] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [r["loss"] for r in log_rows], "k-", lw=2, label="total")
    for key, style in [("bce", "C0--"), ("dice", "C1--"), ("rel", "C2--"),
                       ("score", "C3--")]:
        ax1.plot(epochs, [r[key] for r in log_rows], style, label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.set_title("training loss")
    ax2.plot(epochs, [r["train_iou"] for r in log_rows], "C0-", label="train IoU")
    ax2b = ax2.twinx()
    ax2b.plot(epochs, [r["lr"] for r in log_rows], "C3:", label="lr")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("IoU")
    ax2b.set_ylabel("learning rate")
    ax2.set_title("IoU and schedule")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_chart(report, path):
    """Overall and per-tag mIoU / accuracy bars."""
    groups = ["overall", "unique", "multiple"]
    metrics = ["mIoU", "acc_at_025", "acc_at_05"]
    values = {
        "overall": [report[m] for m in metrics],
        "unique": [report["per_tag"]["unique"].get(m, 0.0) for m in metrics],
        "multiple": [report["per_tag"]["multiple"].get(m, 0.0) for m in metrics],
    }
    x = np.arange(len(metrics))
    width = 0.25
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, g in enumerate(groups):
        ax.bar(x + (i - 1) * width, values[g], width, label=g)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    ax.set_title(f"evaluation over {report['n_expressions']} expressions")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_chart(rows, path):
    names = [r["variant"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(1.6 * len(rows) + 2, 4))
    ax.bar(x - 0.2, [r["mIoU"] for r in rows], 0.2, label="mIoU")
    ax.bar(x, [r["acc_at_025"] for r in rows], 0.2, label="Acc@0.25")
    ax.bar(x + 0.2, [r["acc_at_05"] for r in rows], 0.2, label="Acc@0.5")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title("ablation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_latency_hist(t_super, t_point, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    bins = np.linspace(0, max(t_point.max(), t_super.max()) * 1.05, 40)
    ax.hist(t_super, bins=bins, alpha=0.7,
            label=f"superpoint (median {np.median(t_super):.2f} ms)")
    ax.hist(t_point, bins=bins, alpha=0.7,
            label=f"point (median {np.median(t_point):.2f} ms)")
    ax.set_xlabel("latency per description (ms)")
    ax.set_ylabel("count")
    ax.legend()
    ax.set_title("matching latency")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

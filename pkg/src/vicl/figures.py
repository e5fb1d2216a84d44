"""Matplotlib renderings that accompany the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curves(metrics: list, path: str) -> None:
    """Per-epoch loss components and the learning-rate schedule."""
    epochs = [m["epoch"] for m in metrics]
    fig, (ax, ax_lr) = plt.subplots(
        2, 1, figsize=(6.4, 6.0), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    ax.plot(epochs, [m["loss_tp"] for m in metrics], label="token prediction", lw=1.6)
    ax.plot(epochs, [m["loss_pa"] for m in metrics], label="pre-alignment", lw=1.6)
    ax.plot(epochs, [m["loss_total"] for m in metrics], label="total", lw=1.6, ls="--")
    ax.set_ylabel("epoch-mean loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    ax_lr.plot(epochs, [m["lr"] for m in metrics], color="gray", lw=1.4)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("epoch")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_panel(report, samples: list, preds: list, path: str,
                    max_panels: int = 6) -> None:
    """Per-query metric bars plus a few (image, truth, prediction) triplets."""
    n = min(max_panels, len(samples))
    fig = plt.figure(figsize=(2.2 * max(n, 3), 7.0))
    gs = fig.add_gridspec(4, max(n, 1), height_ratios=[1.4, 1, 1, 1])

    ax = fig.add_subplot(gs[0, :])
    values = [r["metric"] for r in report.records]
    ax.bar(range(len(values)), values, color="#4878cf")
    ax.axhline(report.mean_metric, color="crimson", lw=1.2,
               label=f"mean {report.metric_name} = {report.mean_metric:.3f}")
    ax.set_xlabel("test query")
    ax.set_ylabel(report.metric_name)
    ax.legend(frameon=False)

    for i in range(n):
        for row, (img, title) in enumerate(
                ((samples[i].image, "image"), (samples[i].label, "truth"),
                 (preds[i], "prediction")), start=1):
            axi = fig.add_subplot(gs[row, i])
            axi.imshow(np.clip(img, 0, 1))
            axi.set_xticks([])
            axi.set_yticks([])
            if i == 0:
                axi.set_ylabel(title)
    fig.suptitle(f"{report.task}: {report.metric_name} over {len(values)} queries")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_plot(rows: list, path: str) -> None:
    """Per-query latency against K for the one-pass and per-prompt routes."""
    ks = [r["k"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.plot(ks, [r["condense_ms"] for r in rows], marker="o", label="condense (one pass)")
    ax.plot(ks, [r["fusion_ms"] for r in rows], marker="s", label="output fusion (K passes)")
    ax.set_xscale("log", base=2)
    ax.set_xticks(ks)
    ax.get_xaxis().set_major_formatter(plt.matplotlib.ticker.ScalarFormatter())
    ax.set_xlabel("candidate prompts K")
    ax.set_ylabel("ms / query (median)")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""PNG figures written next to the CSV/JSON run outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import moving_average  # noqa: E402


def plot_training_curves(metrics: dict, path, window: int = 20) -> Path:
    """Losses with their moving average, plus the lr and EMA momentum schedules."""
    step = metrics["step"]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    ax = axes[0]
    ax.plot(step, metrics["l_byol"], lw=0.8, alpha=0.5, label="l_byol")
    ma = moving_average(metrics["l_byol"], window)
    if len(ma):
        ax.plot(step[window - 1 :], ma, lw=1.6, label=f"l_byol ({window}-step mean)")
    for key in ("l_box_pred", "l_box_reg"):
        if np.any(metrics[key]):
            ax.plot(step, metrics[key], lw=0.8, label=key)
    ax.set_xlabel("step")
    ax.set_title("losses")
    ax.legend(fontsize=7)
    axes[1].plot(step, metrics["lr"])
    axes[1].set_title("learning rate")
    axes[1].set_xlabel("step")
    axes[2].plot(step, metrics["m"])
    axes[2].set_title("EMA momentum")
    axes[2].set_xlabel("step")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation_summary(rows: list, path) -> Path:
    """One bar per grid point, grouped by axis; chance level drawn per point."""
    labels = [f"{r['key']}={r['value']}" for r in rows]
    acc = [float(r["retrieval_top1"]) for r in rows]
    chance = [float(r["chance"]) for r in rows]
    min_std = [float(r["min_std"]) for r in rows]
    keys = sorted({r["key"] for r in rows})
    colors = {k: f"C{i}" for i, k in enumerate(keys)}
    x = np.arange(len(rows))
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(max(8, 1.1 * len(rows) + 4), 3.8))
    ax0.bar(x, acc, color=[colors[r["key"]] for r in rows])
    ax0.scatter(x, chance, marker="_", s=300, color="k", label="chance")
    ax0.set_xticks(x, labels, rotation=45, ha="right", fontsize=8)
    ax0.set_ylabel("retrieval top-1")
    ax0.legend(fontsize=7)
    ax1.bar(x, min_std, color=[colors[r["key"]] for r in rows])
    ax1.axhline(0.01, color="k", lw=0.8, ls="--")
    ax1.set_xticks(x, labels, rotation=45, ha="right", fontsize=8)
    ax1.set_ylabel("min per-dimension std")
    fig.tight_layout()
    return _save(fig, path)


def plot_eval(embeddings: np.ndarray, stats: dict, path) -> Path:
    """Per-dimension std of normalized embeddings and the pairwise cosine histogram."""
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.6))
    ax0.bar(np.arange(e.shape[1]), e.std(axis=0))
    ax0.axhline(0.01, color="k", lw=0.8, ls="--")
    ax0.set_xlabel("embedding dimension")
    ax0.set_ylabel("std")
    ax0.set_title(f"min std {stats['min_std']:.4f}")
    sub = e[:: max(1, len(e) // 512)]
    gram = sub @ sub.T
    ax1.hist(gram[np.triu_indices(len(sub), 1)], bins=50)
    ax1.set_xlabel("pairwise cosine")
    ax1.set_title(f"retrieval top-1 {stats['retrieval_top1']:.3f} (chance {stats['chance']:.3f})")
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path

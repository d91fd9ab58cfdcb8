"""Figures written next to the CSV outputs of the CLI."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "bmlr",
}


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curves(rows, path, title=None):
    """Accuracies, modality ratio and reshape counts per epoch."""
    with plt.rc_context(RC):
        epochs = [r.epoch for r in rows]
        M = len(rows[0].acc_modality)
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))

        ax = axes[0]
        ax.plot(epochs, [r.acc_fused for r in rows], color="k", label="fused")
        for u in range(M):
            ax.plot(epochs, [r.acc_modality[u] for r in rows], label=f"modality {u}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("test accuracy")
        ax.legend()

        ax = axes[1]
        ratios = [np.nan if r.ratio is None else r.ratio for r in rows]
        ax.plot(epochs, ratios, color="tab:purple")
        ax.axhline(1.0, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy ratio m0/m1")

        ax = axes[2]
        for u in range(M):
            ax.plot(epochs, [r.reshape_counts[u] for r in rows], label=f"modality {u}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("reshaped samples")
        ax.legend()

        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_comparison(summary, path):
    """Bar chart of mean final accuracies per method.

    ``summary`` maps method -> dict with ``acc_fused`` and ``acc_modality``.
    """
    with plt.rc_context(RC):
        methods = list(summary)
        M = len(next(iter(summary.values()))["acc_modality"])
        width = 0.8 / (M + 1)
        x = np.arange(len(methods))
        fig, ax = plt.subplots(figsize=(max(4, 1.3 * len(methods)), 3.2))
        ax.bar(x, [summary[m]["acc_fused"] for m in methods], width, color="k", label="fused")
        for u in range(M):
            ax.bar(x + (u + 1) * width, [summary[m]["acc_modality"][u] for m in methods],
                   width, label=f"modality {u}")
        ax.set_xticks(x + width * M / 2)
        ax.set_xticklabels(methods, rotation=20, ha="right")
        ax.set_ylabel("mean test accuracy")
        ax.set_ylim(0, 1)
        ax.legend(ncol=M + 1, loc="upper left")
        return _save(fig, path)


def plot_sweep(results, path):
    """Final fused accuracy against beta, one line per alpha."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for alpha in sorted({r["alpha"] for r in results}):
            pts = sorted((r["beta"], r["acc_fused"]) for r in results if r["alpha"] == alpha)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"alpha={alpha:g}")
        ax.set_xlabel("beta")
        ax.set_ylabel("final fused accuracy")
        ax.legend()
        return _save(fig, path)

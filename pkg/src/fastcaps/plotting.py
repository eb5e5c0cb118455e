"""Matplotlib figures for training, evaluation, sweeps and benchmarks.

All functions write a PNG and return its path. The Agg backend is selected
so nothing needs a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


_provenance: dict[str, str] = {}


def set_provenance(description: str | None) -> None:
    """Text stored in the metadata of every PNG written afterwards."""
    _provenance.clear()
    if description:
        _provenance["Description"] = description


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=dict(_provenance))
    plt.close(fig)
    return path


def plot_pr_curve(rows, path, title: str = "precision-recall") -> Path:
    rows = np.asarray(rows, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ok = ~np.isnan(rows[:, 1])
    ax.plot(rows[ok, 2], rows[ok, 1], marker=".", ms=3)
    ax.set_xlabel("recall (%)")
    ax.set_ylabel("precision (%)")
    ax.set_xlim(0, 101)
    ax.set_ylim(0, 101)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_history(history: list[dict], path, title: str = "training") -> Path:
    epochs = [r["epoch"] for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for key in ("train_loss", "val_loss", "test_loss"):
        vals = [r.get(key, np.nan) for r in history]
        if not np.all(np.isnan(vals)):
            ax1.plot(epochs, vals, label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    for key in ("val_error", "test_error"):
        vals = [r.get(key, np.nan) for r in history]
        if not np.all(np.isnan(vals)):
            ax2.plot(epochs, vals, label=key)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("error (%)")
    ax2.legend()
    fig.suptitle(title)
    return _save(fig, path)


def plot_fraction_sweep(rows: list[dict], path) -> Path:
    fractions = sorted({r["fraction"] for r in rows})
    fig, ax = plt.subplots(figsize=(5, 3.8))
    for f in fractions:
        accs = [r["test_accuracy"] for r in rows if r["fraction"] == f]
        ax.scatter([100 * f] * len(accs), accs, color="grey", s=12)
    med = [np.median([r["test_accuracy"] for r in rows if r["fraction"] == f]) for f in fractions]
    ax.plot([100 * f for f in fractions], med, marker="o", label="median")
    ax.set_xscale("log")
    ax.set_xlabel("training data (%)")
    ax.set_ylabel("test accuracy (%)")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_bench(reports, path) -> Path:
    """Grouped bars of median seconds per phase, min-max as error bars."""
    phases = sorted({p for r in reports for p in r.phases})
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(6, 3.8))
    x = np.arange(len(phases))
    for k, r in enumerate(reports):
        med = np.array([r.phases[p].median if p in r.phases else np.nan for p in phases])
        lo = np.array([r.phases[p].min if p in r.phases else np.nan for p in phases])
        hi = np.array([r.phases[p].max if p in r.phases else np.nan for p in phases])
        ax.bar(x + k * width, med, width, label=f"{r.config_id} ({r.coefficients} coeffs)")
        ax.errorbar(x + k * width, med, yerr=np.vstack([med - lo, hi - med]), fmt="none", ecolor="k", capsize=3)
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(phases)
    ax.set_ylabel("seconds (median)")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_reconstructions(originals: np.ndarray, recons: np.ndarray, path) -> Path:
    """Side-by-side grid; volumes are shown by their middle slice."""
    k = len(originals)
    fig, axes = plt.subplots(2, k, figsize=(1.6 * k + 0.4, 3.4), squeeze=False)
    for i in range(k):
        for row, img in ((0, originals[i]), (1, recons[i])):
            while img.ndim > 2:
                img = img[img.shape[0] // 2]
            axes[row, i].imshow(img, cmap="gray", vmin=0, vmax=1)
            axes[row, i].axis("off")
    axes[0, 0].set_title("input", fontsize=8, loc="left")
    axes[1, 0].set_title("reconstruction", fontsize=8, loc="left")
    return _save(fig, path)

"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METHOD_LABELS = {"ddim": "DDIM", "csg_nomix": "CSG w/o Mixup", "csg": "CSG"}
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _label(method):
    return METHOD_LABELS.get(method, method)


def _show(img):
    return np.clip((np.asarray(img) + 1.0) / 2.0, 0.0, 1.0)


def metric_bars(summary: dict, metric: str, path) -> Path:
    methods = list(summary["methods"])
    means = [summary["methods"][m][metric]["mean"] for m in methods]
    medians = [summary["methods"][m][metric]["median"] for m in methods]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = np.arange(len(methods))
    ax.bar(xs - 0.18, means, width=0.36, label="mean", color="#4477aa")
    ax.bar(xs + 0.18, medians, width=0.36, label="median", color="#cc6677")
    ax.set_xticks(xs, [_label(m) for m in methods])
    ax.set_ylabel(metric)
    if metric in ("bg_mse", "structure_proxy") and min(means + medians) > 0:
        ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)


def paired_scatter(rows: list, metric: str, baseline: str, method: str, path) -> Path:
    base = {(r["task"], r["seed"]): r[metric] for r in rows if r["method"] == baseline}
    pairs = [(base[(r["task"], r["seed"])], r[metric]) for r in rows
             if r["method"] == method and (r["task"], r["seed"]) in base]
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    if pairs:
        a = np.array(pairs)
        ax.scatter(a[:, 0], a[:, 1], s=12, color="#228833")
        lo, hi = a[a > 0].min() if np.any(a > 0) else 1e-6, a.max()
        ax.plot([lo, hi], [lo, hi], color="grey", lw=0.8, ls="--")
        if np.all(a > 0):
            ax.set_xscale("log")
            ax.set_yscale("log")
    ax.set_xlabel(f"{_label(baseline)} {metric}")
    ax.set_ylabel(f"{_label(method)} {metric}")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)


def example_grid(examples: list, path) -> Path:
    """One row per scene: source, background mask, then each method's output.

    ``examples`` items are dicts with ``source``, ``background`` and ``outputs`` ({method: image}).
    """
    if not examples:
        return Path(path)
    methods = list(examples[0]["outputs"])
    ncol = 2 + len(methods)
    fig, axes = plt.subplots(len(examples), ncol, figsize=(1.4 * ncol, 1.4 * len(examples)), squeeze=False)
    for r, ex in enumerate(examples):
        panels = [("source", _show(ex["source"]), None), ("P (background)", ex["background"], "gray")]
        panels += [(_label(m), _show(ex["outputs"][m]), None) for m in methods]
        for c, (title, img, cmap) in enumerate(panels):
            ax = axes[r, c]
            ax.imshow(img, cmap=cmap, vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)


def mask_schedule(background: np.ndarray, T: int, delta: float, path, n_panels: int = 6) -> Path:
    """The anchored set B_t at a few timesteps from t=T down to t=1."""
    from .masks import binary_schedule

    ts = np.unique(np.linspace(T, 1, n_panels).round().astype(int))[::-1]
    fig, axes = plt.subplots(1, len(ts) + 1, figsize=(1.5 * (len(ts) + 1), 1.7))
    axes[0].imshow(background, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    axes[0].set_title("P", fontsize=8)
    for ax, t in zip(axes[1:], ts):
        ax.imshow(binary_schedule(background, int(t), T, delta), cmap="gray", vmin=0, vmax=1,
                  interpolation="nearest")
        ax.set_title(f"B_{t}", fontsize=8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)


def training_curve(rows: list, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    ep = [r["epoch"] for r in rows]
    ax.plot(ep, [r["train_mse"] for r in rows], label="train")
    ax.plot(ep, [r["val_mse"] for r in rows], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("epsilon MSE")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)

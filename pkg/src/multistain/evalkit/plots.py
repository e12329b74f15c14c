"""Static figures for reports: metric bars, loss curves, sample grids."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BAR_METRICS = ("dab_dice", "seg_dice", "ssim_pct", "negative_fp_pct")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def metric_bars(reports, path, metric_names=BAR_METRICS) -> Path:
    """One panel per metric; grouped bars per marker, one bar per report."""
    present = [m for m in metric_names
               if any(m in v for r in reports for v in r.per_marker.values())]
    if not present:
        present = ["seg_dice"]
    markers = sorted({m for r in reports for m in r.per_marker})
    fig, axes = plt.subplots(1, len(present), figsize=(3.2 * len(present), 3.0), squeeze=False)
    width = 0.8 / max(len(reports), 1)
    x = np.arange(len(markers))
    for ax, metric in zip(axes[0], present):
        for i, rep in enumerate(reports):
            vals = [rep.per_marker.get(mk, {}).get(metric, np.nan) for mk in markers]
            ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=rep.model_id)
        ax.set_xticks(x)
        ax.set_xticklabels(markers)
        ax.set_title(metric)
    axes[0][-1].legend(fontsize=7, loc="best")
    fig.tight_layout()
    return _save(fig, path)


def loss_curves(history, path, smooth: int = 50) -> Path:
    cols = [c for c in ("total", "l2", "perceptual", "clip", "adv_g", "adv_d") if c in history[0]]
    steps = np.array([h["step"] for h in history])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for c in cols:
        v = np.array([h[c] for h in history], dtype=float)
        k = max(1, min(smooth, len(v)))
        sm = np.convolve(v, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], sm, label=c, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (running mean)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def sample_grid(inputs, generated: dict, path, targets: dict | None = None, masks: dict | None = None) -> Path:
    """Rows: tiles. Columns: input, then per marker generated (and GT / DAB mask if given)."""
    n = len(inputs)
    cols = [("H&E", list(inputs))]
    for marker, tiles in generated.items():
        cols.append((f"{marker} gen", list(tiles)))
        if targets is not None and marker in targets:
            cols.append((f"{marker} GT", list(targets[marker])))
        if masks is not None and marker in masks:
            cols.append((f"{marker} DAB", list(masks[marker])))
    fig, axes = plt.subplots(n, len(cols), figsize=(1.4 * len(cols), 1.4 * n), squeeze=False)
    for j, (title, tiles) in enumerate(cols):
        for i in range(n):
            ax = axes[i][j]
            img = tiles[i]
            ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1 if img.ndim == 2 else None)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(title, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)

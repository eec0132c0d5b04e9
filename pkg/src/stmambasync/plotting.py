"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}
COLORS = ["#3498db", "#e74c3c", "#2ecc71", "#9b59b6", "#34495e", "#95a5a6"]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curves(epochs: list[dict], path, best_epoch: int | None = None) -> Path:
    """Train/validation MAE per epoch."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        ep = [r["epoch"] for r in epochs]
        ax.plot(ep, [r["train_mae"] for r in epochs], color=COLORS[0], label="train")
        ax.plot(ep, [r["val_mae"] for r in epochs], color=COLORS[1], label="validation")
        if best_epoch:
            ax.axvline(best_epoch, color="0.5", ls="--", lw=0.8, label=f"best ({best_epoch})")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MAE")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_per_step(curves: dict[str, list[dict]], path) -> Path:
    """MAE, RMSE and MAPE against forecast step, one line per labelled run."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        for c, (label, rows) in enumerate(curves.items()):
            steps = [r["step"] for r in rows]
            for ax, metric in zip(axes, ("RMSE", "MAE", "MAPE")):
                ax.plot(steps, [r[metric] for r in rows], marker="o", ms=3,
                        color=COLORS[c % len(COLORS)], label=label)
        for ax, metric in zip(axes, ("RMSE", "MAE", "MAPE (%)")):
            ax.set_xlabel("forecast step (5 min)")
            ax.set_ylabel(metric)
        if len(curves) > 1:
            axes[0].legend(frameon=False, fontsize=8)
        return _save(fig, path)


def plot_tradeoff(rows: list[dict], path) -> Path:
    """MAE against counted FLOPS; bubble area follows train + inference time."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 4))
        total = [r["train_s"] + r["infer_s"] for r in rows]
        top = max(total) or 1.0
        for i, (r, t) in enumerate(zip(rows, total)):
            ax.scatter(r["flops_m"], r["MAE"], s=60 + 600 * t / top, alpha=0.6,
                       color=COLORS[i % len(COLORS)])
            ax.annotate(f"A{r['attn_layers']} M{r['mamba_layers']}", (r["flops_m"], r["MAE"]),
                        textcoords="offset points", xytext=(6, 4), fontsize=8)
        ax.set_xlabel("FLOPS (M multiply-adds per window)")
        ax.set_ylabel("test MAE")
        return _save(fig, path)


def plot_flops_breakdown(stages: dict[str, int], path, timings: dict[str, float] | None = None) -> Path:
    """Bar chart of counted FLOPS per stage, with measured time when available."""
    with plt.rc_context(STYLE):
        ncol = 2 if timings else 1
        fig, axes = plt.subplots(1, ncol, figsize=(4.5 * ncol, 3.2), squeeze=False)
        names = list(stages)
        axes[0, 0].bar(names, [stages[n] / 1e6 for n in names], color=COLORS[0])
        axes[0, 0].set_ylabel("M multiply-adds")
        if timings:
            axes[0, 1].bar(names, [timings.get(n, 0.0) for n in names], color=COLORS[1])
            axes[0, 1].set_ylabel("seconds per sweep")
        return _save(fig, path)

"""Markdown run reports with matplotlib figures rendered alongside the CSVs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError
from .train import ConfusionMatrix, RunHistory, compare_medians

FIG_SIZE = (6.4, 4.0)
DPI = 120


def _save(fig, path):
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)


def render_history_figure(hist: RunHistory, path) -> None:
    epochs = np.arange(1, len(hist.train_loss) + 1)
    fig, (ax_loss, ax_acc) = plt.subplots(2, 1, figsize=(FIG_SIZE[0], 6.0), sharex=True)
    ax_loss.plot(epochs, hist.train_loss, color="tab:red")
    ax_loss.set_ylabel("train loss")
    ax_loss.grid(alpha=0.3)
    ax_acc.plot(epochs, hist.train_acc, label="train", color="tab:blue")
    ax_acc.plot(epochs, hist.val_acc, label="val", color="tab:green")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("top-1 accuracy")
    ax_acc.set_ylim(0.0, 1.02)
    ax_acc.legend(loc="lower right")
    ax_acc.grid(alpha=0.3)
    _save(fig, path)


def render_grid_figure(agg: list[dict], path) -> None:
    branches = sorted({r["branches"] for r in agg})
    units = sorted({r["units"] for r in agg})
    grid = np.full((len(units), len(branches)), np.nan)
    for r in agg:
        grid[units.index(r["units"]), branches.index(r["branches"])] = r["mean"]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    im = ax.imshow(grid, origin="lower", cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(branches)), [str(b) for b in branches])
    ax.set_yticks(range(len(units)), [str(u) for u in units])
    ax.set_xlabel("branches")
    ax.set_ylabel("units per branch")
    for i in range(len(units)):
        for j in range(len(branches)):
            if not math.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, label="mean test accuracy")
    _save(fig, path)


def render_confusion_figure(cm: ConfusionMatrix, path, class_names=None) -> None:
    k = cm.counts.shape[0]
    names = class_names or [f"class_{i}" for i in range(k)]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(k), names, rotation=45, ha="right")
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = cm.counts.max() / 2 if cm.counts.max() else 0
    for i in range(k):
        for j in range(k):
            color = "white" if cm.counts[i, j] > thresh else "black"
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center", color=color, fontsize=8)
    fig.colorbar(im, ax=ax, label="count")
    _save(fig, path)


def render_compare_figure(rows: list[dict], path) -> None:
    heads = []
    for r in rows:
        if r["head"] not in heads:
            heads.append(r["head"])
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    for i, head in enumerate(heads):
        accs = [r["test_acc"] for r in rows if r["head"] == head]
        ax.scatter([i] * len(accs), accs, alpha=0.6, label=head)
        ax.hlines(float(np.median(accs)), i - 0.2, i + 0.2, color="black")
    ax.set_xticks(range(len(heads)), heads)
    ax.set_ylabel("test top-1 accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_title("per-seed accuracy (bar = median)")
    _save(fig, path)


def _md_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def write_report(
    out_dir,
    history: RunHistory | None = None,
    grid_agg: list[dict] | None = None,
    compare_rows: list[dict] | None = None,
    confusion: ConfusionMatrix | None = None,
    config_echo: dict | None = None,
    class_names: list[str] | None = None,
) -> Path:
    """Write ``report.md`` plus figures for whichever artifacts are present."""
    if history is None and grid_agg is None and compare_rows is None and confusion is None:
        raise ConfigError("write_report needs at least one artifact")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = ["# Run report\n"]
    if config_echo:
        parts.append("## Configuration\n")
        parts.append(_md_table(["key", "value"], [[k, str(v)] for k, v in config_echo.items()]))
    if history is not None:
        render_history_figure(history, out_dir / "history.png")
        parts.append("## Training\n")
        parts.append(
            f"- epochs: {len(history.train_loss)}\n"
            f"- best validation epoch: {history.best_epoch + 1} "
            f"(val acc {history.val_acc[history.best_epoch]:.4f})\n"
            f"- final test top-1 accuracy: {history.test_acc:.4f}\n"
            f"- wall time: {history.wall_time_s:.1f} s\n"
        )
        parts.append("![training curves](history.png)\n")
    if confusion is not None:
        render_confusion_figure(confusion, out_dir / "confusion.png", class_names)
        k = confusion.counts.shape[0]
        names = class_names or [f"class_{i}" for i in range(k)]
        parts.append("## Confusion matrix (rows true, columns predicted)\n")
        parts.append(
            _md_table(
                ["true \\ pred"] + names,
                [[names[i]] + [str(int(v)) for v in confusion.counts[i]] for i in range(k)],
            )
        )
        parts.append(f"\naccuracy: {confusion.accuracy():.4f} on {confusion.total()} samples\n")
        parts.append("![confusion matrix](confusion.png)\n")
    if grid_agg is not None:
        render_grid_figure(grid_agg, out_dir / "grid_heatmap.png")
        parts.append("## Ablation grid (mean test accuracy)\n")
        parts.append(
            _md_table(
                ["branches", "units", "mean", "std"],
                [
                    [str(r["branches"]), str(r["units"]), f"{r['mean']:.4f}", f"{r['std']:.4f}"]
                    for r in grid_agg
                ],
            )
        )
        parts.append("![ablation grid](grid_heatmap.png)\n")
    if compare_rows is not None:
        render_compare_figure(compare_rows, out_dir / "compare.png")
        extra = sorted({k for r in compare_rows for k in r if k not in ("head", "seed", "test_acc")})
        parts.append("## Head comparison\n")
        parts.append(
            _md_table(
                ["head", "seed", "test_acc"] + extra,
                [
                    [str(r["head"]), str(r["seed"]), f"{r['test_acc']:.4f}"]
                    + [f"{r.get(k, float('nan')):.4f}" for k in extra]
                    for r in compare_rows + compare_medians(compare_rows)
                ],
            )
        )
        parts.append("![head comparison](compare.png)\n")
    path = out_dir / "report.md"
    path.write_text("\n".join(parts))
    return path

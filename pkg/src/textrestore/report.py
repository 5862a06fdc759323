"""Report rendering: metric tables (Markdown + CSV) and matplotlib figures
written next to the delimited output in the run's reports directory."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport

TABLE_COLUMNS = ["Model", "Precision", "Recall", "F1-Score", "None", "Full", "PSNR", "SSIM"]


def _row_values(name: str, report: EvalReport) -> list[str]:
    def fmt(x, nd=2):
        return "-" if x is None else f"{x:.{nd}f}"

    return [
        name, fmt(report.det_precision), fmt(report.det_recall), fmt(report.det_f1),
        fmt(report.e2e_none_f1), fmt(report.e2e_full_f1),
        fmt(report.psnr), fmt(report.ssim, 4),
    ]


def render_markdown_table(rows: dict[str, EvalReport]) -> str:
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |",
             "|" + "|".join("---" for _ in TABLE_COLUMNS) + "|"]
    for name, rep in rows.items():
        lines.append("| " + " | ".join(_row_values(name, rep)) + " |")
    return "\n".join(lines) + "\n"


def write_csv_table(rows: dict[str, EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TABLE_COLUMNS)
        for name, rep in rows.items():
            writer.writerow(_row_values(name, rep))


def write_loss_csv(curve: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "loss"])
        writer.writeheader()
        for row in curve:
            writer.writerow({"epoch": row["epoch"], "loss": row["loss"]})


def save_loss_figure(curve: list[dict], path: str | Path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r["epoch"] for r in curve], [r["loss"] for r in curve], marker="o", ms=2.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(rows: dict[str, EvalReport], path: str | Path) -> None:
    metrics = ["det_f1", "e2e_none_f1", "e2e_full_f1"]
    labels = ["Det F1", "E2E None", "E2E Full"]
    names = list(rows)
    x = np.arange(len(metrics))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(6, 3.4))
    for i, name in enumerate(names):
        vals = [getattr(rows[name], m) for m in metrics]
        ax.bar(x + i * width, vals, width, label=name)
    ax.set_xticks(x + width * (len(names) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set_ylabel("score (%)")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_comparison_grid(path: str | Path, lq: np.ndarray, restored: np.ndarray,
                         reference: np.ndarray | None = None, title: str = "") -> None:
    """Side-by-side LQ / restored / GT panel for one input."""
    panels = [("LQ", lq), ("restored", restored)]
    if reference is not None:
        panels.append(("GT", reference))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.9))
    if len(panels) == 1:
        axes = [axes]
    for ax, (name, img) in zip(axes, panels):
        ax.imshow(np.clip(img, 0, 1))
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

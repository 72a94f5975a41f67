"""Figure-ready exports from finished run directories.

``report`` never mutates a run directory: it reads the delimited outputs
(metrics, gradient-variance, equal-data comparisons, fine-tuning history)
and writes tidy CSVs plus rendered PNG figures into a separate report
directory.
"""

from __future__ import annotations

import csv
import shutil
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .trainer import read_metrics_csv

_PANELS = [
    ("loss_contrastive_per_step", "contrastive loss / masked step"),
    ("loss_diversity", "diversity loss"),
    ("loss_penalty", "l2 penalty loss"),
    ("accuracy", "masked prediction accuracy"),
    ("perplexity_g1", "codebook 1 perplexity"),
    ("perplexity_g2", "codebook 2 perplexity"),
    ("sim_avg_g1", "codebook 1 avg cosine"),
    ("sim_min_g1", "codebook 1 min cosine"),
    ("sim_max_g1", "codebook 1 max cosine"),
    ("sim_avg_g2", "codebook 2 avg cosine"),
    ("sim_min_g2", "codebook 2 min cosine"),
    ("sim_max_g2", "codebook 2 max cosine"),
]


def render_pretrain_curves(metrics_path: Path, out_dir: Path) -> list[Path]:
    records = read_metrics_csv(metrics_path)
    steps = [r.step for r in records]
    fig, axes = plt.subplots(3, 4, figsize=(16, 9))
    for ax, (field, label) in zip(axes.flat, _PANELS):
        ax.plot(steps, [getattr(r, field) for r in records])
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("step", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    png = out_dir / "pretrain_curves.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    csv_copy = out_dir / "pretrain_curves.csv"
    shutil.copyfile(metrics_path, csv_copy)
    return [csv_copy, png]


def render_grad_variance(probe_path: Path, out_dir: Path) -> list[Path]:
    with open(probe_path, newline="") as f:
        rows = list(csv.DictReader(f))
    by_batch: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        by_batch.setdefault(row["batch_seconds"], []).append(
            (int(row["step"]), float(row["avg_std"]))
        )
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for batch_seconds, points in sorted(by_batch.items(), key=lambda kv: float(kv[0])):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points],
                marker="o", label=f"{float(batch_seconds):g} s")
    ax.set_xlabel("pretraining step")
    ax.set_ylabel("gradient std, averaged over parameters")
    ax.set_yscale("log")
    ax.legend(title="batch size", fontsize=8)
    fig.tight_layout()
    png = out_dir / "grad_variance.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    csv_copy = out_dir / "grad_variance.csv"
    shutil.copyfile(probe_path, csv_copy)
    return [csv_copy, png]


def render_equal_data(comparison_path: Path, out_dir: Path) -> list[Path]:
    with open(comparison_path, newline="") as f:
        rows = list(csv.DictReader(f))
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    by_batch: dict[float, list[dict]] = {}
    for row in rows:
        by_batch.setdefault(float(row["batch_seconds"]), []).append(row)
    for batch_seconds, group in sorted(by_batch.items()):
        group.sort(key=lambda r: float(r["hours_seen"]))
        hours = [float(r["hours_seen"]) for r in group]
        axes[0].plot(hours, [float(r["val_contrastive_per_step"]) for r in group],
                     marker="o", label=f"{batch_seconds:g} s")
        axes[1].plot(hours, [float(r["cer"]) for r in group],
                     marker="o", label=f"{batch_seconds:g} s")
    axes[0].set_ylabel("validation contrastive loss / masked step")
    axes[1].set_ylabel("character error rate")
    for ax in axes:
        ax.set_xlabel("hours of speech seen (upper bound)")
        ax.legend(title="batch size", fontsize=8)
    fig.tight_layout()
    png = out_dir / "equal_data.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    csv_copy = out_dir / "equal_data.csv"
    shutil.copyfile(comparison_path, csv_copy)
    return [csv_copy, png]


def render_finetune_history(history_path: Path, out_dir: Path) -> list[Path]:
    with open(history_path, newline="") as f:
        rows = list(csv.DictReader(f))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot([int(r["step"]) for r in rows], [float(r["train_ctc_loss"]) for r in rows])
    ax.set_xlabel("fine-tuning step")
    ax.set_ylabel("training CTC loss")
    fig.tight_layout()
    png = out_dir / "finetune_loss.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    csv_copy = out_dir / "finetune_loss.csv"
    shutil.copyfile(history_path, csv_copy)
    return [csv_copy, png]


def generate_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render every recognized artifact in ``run_dir``; returns written paths."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if (run_dir / "metrics.csv").exists():
        written += render_pretrain_curves(run_dir / "metrics.csv", out_dir)
    if (run_dir / "gradvar.csv").exists():
        written += render_grad_variance(run_dir / "gradvar.csv", out_dir)
    if (run_dir / "comparison.csv").exists():
        written += render_equal_data(run_dir / "comparison.csv", out_dir)
    if (run_dir / "ft_metrics.csv").exists():
        written += render_finetune_history(run_dir / "ft_metrics.csv", out_dir)
    if not written:
        raise FileNotFoundError(
            f"{run_dir} contains none of metrics.csv, gradvar.csv, comparison.csv, ft_metrics.csv"
        )
    return written

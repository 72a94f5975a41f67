"""Equal-data-seen experiment: hold batch_seconds x iterations fixed.

Runs one pretraining per (batch_seconds, iterations) pair from shared
initial weights, fine-tunes each final checkpoint, and emits one
comparison row per condition. All pairs must share the same product, so
every condition ends having seen the same upper-bound amount of speech.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from .config import RunConfig
from .ctc import CtcFinetuner
from .dataset import Manifest
from .trainer import SslTrainer

COMPARISON_FIELDS = ["hours_seen", "batch_seconds", "iterations", "val_contrastive_per_step", "cer"]


def run_equal_data(
    cfg: RunConfig,
    pairs: list[tuple[float, int]],
    train_manifest: Manifest,
    val_manifest: Manifest,
    out_dir: str | Path,
    finetune_steps: int | None = None,
) -> list[dict]:
    products = {b * n for b, n in pairs}
    if len(products) != 1:
        raise ValueError(
            f"all pairs must share the same batch_seconds x iterations product, got {sorted(products)}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for batch_seconds, iterations in pairs:
        run_cfg = replace(cfg, batch_seconds=batch_seconds, iterations=iterations)
        run_dir = out_dir / f"b{batch_seconds:g}-n{iterations}"
        trainer = SslTrainer(run_cfg, train_manifest, val_manifest, out_dir=run_dir)
        records = trainer.run()
        final = records[-1]
        ckpt = run_dir / f"step-{trainer.step:08d}.ckpt"
        ft_cfg = run_cfg if finetune_steps is None else replace(run_cfg, ft_steps=finetune_steps)
        tuner = CtcFinetuner(
            ft_cfg, train_manifest, val_manifest,
            init_checkpoint=ckpt, out_dir=run_dir / "finetune",
        )
        tuner.run()
        result = tuner.evaluate()
        rows.append(
            {
                "hours_seen": batch_seconds * iterations / 3600.0,
                "batch_seconds": batch_seconds,
                "iterations": iterations,
                "val_contrastive_per_step": final.loss_contrastive_per_step,
                "cer": result.cer,
            }
        )
    with open(out_dir / "comparison.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=COMPARISON_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows

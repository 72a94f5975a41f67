"""Gradient-variance probe: how noisy are batch gradients at a checkpoint?

Reloads a pretraining checkpoint, draws fresh batches at the checkpoint's
batch duration, and records the raw backward-pass gradient of each batch
(no optimizer state, no learning rate, no parameter updates). The report
is the per-parameter variance across those gradients, summarized as the
mean per-parameter standard deviation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .batching import BatchAssembler, GpuBatch, pad_and_collate
from .checkpoint import load_checkpoint
from .dataset import Manifest
from .model import SslModel, ssl_step
from .numerics import new_generator
from .quantizer import TempSchedule


@dataclass
class GradVarianceReport:
    step: int
    batch_seconds: float
    avg_std: float
    n_batches: int
    num_parameters: int


def batch_gradient(
    model: SslModel,
    gpu_batches: Sequence[GpuBatch],
    tau: float,
    generator: torch.Generator,
    train_mode: bool = True,
) -> torch.Tensor:
    """Flat gradient of the averaged gpu-batch losses, as used for one update."""
    dtype = next(model.parameters()).dtype
    for p in model.parameters():
        p.grad = None
    for batch in gpu_batches:
        waveforms, _, frame_lens = pad_and_collate(batch.utterances)
        result = ssl_step(
            model,
            torch.from_numpy(waveforms).to(dtype),
            torch.from_numpy(frame_lens),
            tau,
            generator,
            training=train_mode,
        )
        (result.loss / len(gpu_batches)).backward()
    pieces = []
    for _, p in sorted(model.named_parameters()):
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        pieces.append(g.reshape(-1).detach().clone())
    for p in model.parameters():
        p.grad = None
    return torch.cat(pieces)


def variance_summary(grad_vectors: list[torch.Tensor]) -> tuple[float, int]:
    """Mean over parameters of the per-parameter std across gradient draws.

    Uses the unbiased (n-1) sample variance, so at least two draws are
    required.
    """
    n = len(grad_vectors)
    if n < 2:
        raise ValueError("variance needs at least 2 gradient samples")
    stacked = torch.stack(grad_vectors)
    std = stacked.var(dim=0, unbiased=True).sqrt()
    return float(std.mean()), stacked.shape[1]


def probe_gradients(
    model: SslModel,
    batch_groups: Iterable[Sequence[GpuBatch]],
    tau: float,
    seed: int,
    train_mode: bool = True,
) -> list[torch.Tensor]:
    """Gradient vectors for independently sampled batches.

    Each group gets its own random stream, mirroring independent sampling;
    model parameters are left bit-identical (verified by the caller's
    tests via checksums).
    """
    master = new_generator(seed)
    vectors = []
    for group in batch_groups:
        gen = new_generator(int(torch.randint(0, 2**62, (1,), generator=master).item()))
        vectors.append(batch_gradient(model, group, tau, gen, train_mode=train_mode))
    return vectors


def probe(
    checkpoint_path: str | Path,
    manifest: Manifest,
    n_batches: int = 10,
    seed: int = 0,
    train_mode: bool = True,
) -> GradVarianceReport:
    """Full probe of one checkpoint against fresh batches from ``manifest``."""
    if n_batches < 2:
        raise ValueError("n_batches must be >= 2 for a variance estimate")
    ckpt = load_checkpoint(checkpoint_path)
    cfg = ckpt.config
    model = SslModel(cfg, new_generator(cfg.seed))
    own = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(ckpt.model_tensors()[name].to(p.dtype))
    temp = TempSchedule(
        tau_start=cfg.tau_start, tau_floor=cfg.tau_floor,
        total_steps=cfg.iterations, floor_at=cfg.tau_floor_at,
    )
    tau = temp.temperature_at(ckpt.step)
    assembler = BatchAssembler(
        manifest,
        threshold_seconds=cfg.gpu_batch_seconds,
        seed=seed + 1,
        bin_size=cfg.bin_size,
        queue_size=cfg.queue_size,
        max_spread_seconds=cfg.max_spread_seconds,
        passes=None,
    )
    groups = [
        [assembler.next_gpu_batch() for _ in range(cfg.accumulation)]
        for _ in range(n_batches)
    ]
    vectors = probe_gradients(model, groups, tau, seed, train_mode=train_mode)
    avg_std, num_params = variance_summary(vectors)
    return GradVarianceReport(
        step=ckpt.step,
        batch_seconds=cfg.batch_seconds,
        avg_std=avg_std,
        n_batches=n_batches,
        num_parameters=num_params,
    )


PROBE_FIELDS = ["step", "batch_seconds", "avg_std", "n_batches"]


def write_probe_csv(reports: list[GradVarianceReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PROBE_FIELDS)
        for r in reports:
            writer.writerow([r.step, repr(r.batch_seconds), repr(r.avg_std), r.n_batches])

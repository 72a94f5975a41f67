"""Pretraining loop: cyclic LR, batch-size LR heuristics, AdamW, validation.

The learning-rate heuristics map an aggregate batch duration ``s`` (seconds
of speech per update) to a peak LR relative to the reference operating
point of 5e-4 at 6000 seconds: constant, square-root (sub-linear), or
linear scaling. The schedule is triangular: linear ramps between
peak/100 and peak over ``half_cycle`` steps each way, repeated
``num_cycles`` times, which puts cycle boundaries at comparable points
across runs with different lengths.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .batching import BatchAssembler, pad_and_collate, write_ledger_csv
from .checkpoint import (
    Checkpoint,
    decode_rng_state,
    encode_rng_state,
    load_checkpoint,
    save_checkpoint,
)
from .config import RunConfig
from .dataset import Manifest
from .model import SslModel, ssl_step
from .numerics import new_generator
from .quantizer import TempSchedule, codebook_similarity_stats

REFERENCE_MAX_LR = 5e-4
REFERENCE_BATCH_SECONDS = 6000.0


class TrainingDiverged(RuntimeError):
    pass


def lr_heuristic(batch_seconds: float, kind: str) -> float:
    """Peak learning rate for a batch duration under one scaling heuristic."""
    if batch_seconds <= 0:
        raise ValueError("batch_seconds must be positive")
    ratio = batch_seconds / REFERENCE_BATCH_SECONDS
    if kind == "const":
        return REFERENCE_MAX_LR
    if kind == "lin":
        return REFERENCE_MAX_LR * ratio
    if kind == "sub":
        return REFERENCE_MAX_LR * math.sqrt(ratio)
    raise ValueError(f"unknown LR heuristic {kind!r}")


@dataclass
class CyclicLr:
    max_lr: float
    half_cycle: int = 25_000
    num_cycles: int = 8

    @property
    def base_lr(self) -> float:
        return self.max_lr / 100.0

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be non-negative")
        period = 2 * self.half_cycle
        if step >= self.num_cycles * period:
            return self.base_lr
        pos = step % period
        if pos <= self.half_cycle:
            frac = pos / self.half_cycle
        else:
            frac = 1.0 - (pos - self.half_cycle) / self.half_cycle
        return self.base_lr + (self.max_lr - self.base_lr) * frac


def resolve_max_lr(cfg: RunConfig) -> float:
    if cfg.lr_kind == "manual":
        return cfg.max_lr
    return lr_heuristic(cfg.batch_seconds, cfg.lr_kind)


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over named parameters.

    Parameters whose ``.grad`` is None (frozen or untouched) are skipped
    entirely: no moment update, no decay.
    """

    def __init__(
        self,
        named_params: dict[str, torch.nn.Parameter],
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-6,
        weight_decay: float = 0.01,
    ):
        self.params = dict(sorted(named_params.items()))
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        with torch.no_grad():
            for name, p in self.params.items():
                if p.grad is None:
                    continue
                g = p.grad
                m = self.m[name].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v = self.v[name].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                p.mul_(1.0 - lr * self.weight_decay)
                p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], t: int) -> None:
        for name in self.params:
            self.m[name] = tensors[f"m.{name}"].to(self.m[name].dtype).clone()
            self.v[name] = tensors[f"v.{name}"].to(self.v[name].dtype).clone()
        self.t = t


@dataclass
class MetricRecord:
    step: int
    loss_contrastive: float
    loss_contrastive_per_step: float
    loss_diversity: float
    loss_penalty: float
    loss_total: float
    accuracy: float
    perplexity_g1: float
    perplexity_g2: float
    sim_avg_g1: float
    sim_min_g1: float
    sim_max_g1: float
    sim_avg_g2: float
    sim_min_g2: float
    sim_max_g2: float
    lr: float
    hours_seen_upper: float
    hours_seen_measured: float
    masked_steps: int


METRIC_FIELDS = [f.name for f in fields(MetricRecord)]
METRICS_SCHEMA = "# w2v2lab-metrics-v1"


def write_metrics_csv(records: list[MetricRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        f.write(METRICS_SCHEMA + "\n")
        writer = csv.writer(f)
        writer.writerow(METRIC_FIELDS)
        for r in records:
            writer.writerow([repr(getattr(r, name)) for name in METRIC_FIELDS])


def read_metrics_csv(path: str | Path) -> list[MetricRecord]:
    records = []
    with open(path, newline="") as f:
        first = f.readline().strip()
        if first != METRICS_SCHEMA:
            raise ValueError(f"{path}: unknown metrics schema line {first!r}")
        reader = csv.DictReader(f)
        for row in reader:
            records.append(
                MetricRecord(
                    **{
                        name: (int(row[name]) if name in ("step", "masked_steps") else float(row[name]))
                        for name in METRIC_FIELDS
                    }
                )
            )
    return records


def select_best(records: list[MetricRecord], on: str = "ssl") -> MetricRecord:
    """The validation record minimizing the chosen loss; ties pick the earliest."""
    if not records:
        raise ValueError("no validation records to select from")
    key = {"ssl": "loss_total", "contrastive": "loss_contrastive_per_step"}.get(on)
    if key is None:
        raise ValueError(f"unknown selection criterion {on!r}")
    best = records[0]
    for r in records[1:]:
        if getattr(r, key) < getattr(best, key):
            best = r
    return best


def _np_rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


class SslTrainer:
    """Owns model, optimizer, data stream, and validation for one run."""

    def __init__(
        self,
        cfg: RunConfig,
        train_manifest: Manifest,
        val_manifest: Manifest,
        out_dir: str | Path | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dtype = cfg.torch_dtype()
        self.model = SslModel(cfg, new_generator(cfg.seed))
        self.optimizer = AdamW(
            dict(self.model.named_parameters()),
            beta1=cfg.adam_beta1,
            beta2=cfg.adam_beta2,
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )
        self.step_generator = new_generator(cfg.seed + 1)
        self.train_manifest = train_manifest
        self.val_manifest = val_manifest
        self.assembler = BatchAssembler(
            train_manifest,
            threshold_seconds=cfg.gpu_batch_seconds,
            seed=cfg.seed + 2,
            bin_size=cfg.bin_size,
            queue_size=cfg.queue_size,
            max_spread_seconds=cfg.max_spread_seconds,
            passes=None,
        )
        self.schedule = CyclicLr(
            max_lr=resolve_max_lr(cfg), half_cycle=cfg.half_cycle, num_cycles=cfg.num_cycles
        )
        self.temp = TempSchedule(
            tau_start=cfg.tau_start,
            tau_floor=cfg.tau_floor,
            total_steps=cfg.iterations,
            floor_at=cfg.tau_floor_at,
        )
        self.step = 0
        self.records: list[MetricRecord] = []
        self.ledger_rows: list[dict] = []

    # ---- data plumbing ----

    def _batch_tensors(self, batch) -> tuple[torch.Tensor, torch.Tensor]:
        waveforms, _, frame_lens = pad_and_collate(batch.utterances)
        return (
            torch.from_numpy(waveforms).to(self.dtype),
            torch.from_numpy(frame_lens),
        )

    # ---- core loop ----

    def train_step(self) -> float:
        """One aggregate update: assemble, forward/backward per gpu-batch,
        average gradients, apply AdamW at the scheduled LR."""
        cfg = self.cfg
        tau = self.temp.temperature_at(self.step)
        lr = self.schedule.lr_at(self.step)
        self.optimizer.zero_grad()
        total_loss = 0.0
        for _ in range(cfg.accumulation):
            batch = self.assembler.next_gpu_batch()
            waveforms, frame_lens = self._batch_tensors(batch)
            result = ssl_step(
                self.model, waveforms, frame_lens, tau, self.step_generator, training=True
            )
            (result.loss / cfg.accumulation).backward()
            total_loss += float(result.loss.detach())
        if not math.isfinite(total_loss):
            if self.out_dir is not None:
                self.save(self.out_dir / f"diverged-step-{self.step:08d}.ckpt")
                self._flush()
            raise TrainingDiverged(
                f"non-finite pretraining loss {total_loss} at step {self.step}"
            )
        self.optimizer.step(lr)
        self.step += 1
        return total_loss

    def validate(self) -> MetricRecord:
        """Deterministic pass over the validation set with frozen streams.

        Batches, masks, noise, and distractors are identical at every
        validation event, so the metric series reflects parameter movement
        only. The contrastive loss is logged both as the summed form and
        per masked step (comparable across batch compositions).
        """
        cfg = self.cfg
        threshold = cfg.val_batch_seconds if cfg.val_batch_seconds > 0 else cfg.gpu_batch_seconds
        assembler = BatchAssembler(
            self.val_manifest,
            threshold_seconds=threshold,
            seed=cfg.seed + 3,
            bin_size=cfg.bin_size,
            queue_size=cfg.queue_size,
            max_spread_seconds=cfg.max_spread_seconds,
            passes=1,
        )
        gen = new_generator(cfg.seed + 4)
        tau = self.temp.temperature_at(self.step)
        sum_contrastive = 0.0
        sum_penalty = 0.0
        sum_diversity = 0.0
        n_batches = 0
        total_masked = 0
        total_correct = 0.0
        prob_sums = torch.zeros(2, self.cfg.codebook_entries, dtype=self.dtype)
        prob_count = 0
        with torch.no_grad():
            for batch in assembler:
                waveforms, frame_lens = self._batch_tensors(batch)
                result = ssl_step(self.model, waveforms, frame_lens, tau, gen, training=False)
                sum_contrastive += result.breakdown.contrastive
                sum_penalty += result.breakdown.penalty
                sum_diversity += result.breakdown.diversity
                n_batches += 1
                total_masked += result.breakdown.masked_steps
                total_correct += result.breakdown.accuracy * result.breakdown.masked_steps
                prob_sums += result.prob_sums
                prob_count += result.prob_count
        if n_batches == 0:
            raise ValueError("validation manifest produced no batches")
        # Diversity is batch-global by definition; its validation figure is
        # the mean over validation batches. Perplexities pool the selection
        # probabilities over the entire validation set instead.
        diversity = sum_diversity / n_batches
        g1_stats = codebook_similarity_stats(self.model.quantizer.entries[0])
        g2_stats = codebook_similarity_stats(self.model.quantizer.entries[1])
        avg = prob_sums / prob_count
        perp = []
        for gidx in range(2):
            entropy = -(avg[gidx] * torch.log(avg[gidx].clamp_min(1e-300))).sum()
            perp.append(float(torch.exp(entropy)))
        record = MetricRecord(
            step=self.step,
            loss_contrastive=sum_contrastive,
            loss_contrastive_per_step=sum_contrastive / max(total_masked, 1),
            loss_diversity=diversity,
            loss_penalty=sum_penalty,
            loss_total=sum_contrastive + 0.1 * diversity + 10.0 * sum_penalty,
            accuracy=total_correct / max(total_masked, 1),
            perplexity_g1=perp[0],
            perplexity_g2=perp[1],
            sim_avg_g1=g1_stats[0],
            sim_min_g1=g1_stats[1],
            sim_max_g1=g1_stats[2],
            sim_avg_g2=g2_stats[0],
            sim_min_g2=g2_stats[1],
            sim_max_g2=g2_stats[2],
            lr=self.schedule.lr_at(self.step),
            hours_seen_upper=self.step * cfg.batch_seconds / 3600.0,
            hours_seen_measured=self.assembler.ledger.measured_seconds / 3600.0,
            masked_steps=total_masked,
        )
        self.records.append(record)
        self.ledger_rows.append(self.assembler.ledger.row())
        return record

    # ---- persistence ----

    def _rng_states(self) -> dict[str, str]:
        return {"step": encode_rng_state(self.step_generator)}

    def _assembler_state(self) -> dict:
        a = self.assembler
        return {
            "master_rng": _np_rng_state(a.rng),
            "done": sorted(a._done),
            "ledger": {
                "batches_delivered": a.ledger.batches_delivered,
                "measured_seconds": a.ledger.measured_seconds,
                "repeats": a.ledger.repeats,
            },
            "samplers": [
                {
                    "rng": _np_rng_state(s.rng),
                    "order": s.order,
                    "pos": s.pos,
                    "passes_started": s.passes_started,
                    "heap_ids": [item[1] for item in sorted(s.heap)],
                    "returned_ids": [u.id for u in s.returned],
                }
                for s in a.samplers
            ],
        }

    def _restore_assembler(self, state: dict) -> None:
        import heapq

        a = self.assembler
        a.rng.bit_generator.state = state["master_rng"]
        a._done = set(state["done"])
        a.ledger.batches_delivered = state["ledger"]["batches_delivered"]
        a.ledger.measured_seconds = state["ledger"]["measured_seconds"]
        a.ledger.repeats = dict(state["ledger"]["repeats"])
        for s, st in zip(a.samplers, state["samplers"]):
            s.rng.bit_generator.state = st["rng"]
            s.order = list(st["order"])
            s.pos = st["pos"]
            s.passes_started = st["passes_started"]
            by_id = {u.id: u for u in s.utterances}
            s.heap = []
            for uid in st["heap_ids"]:
                u = by_id[uid]
                heapq.heappush(s.heap, (u.num_samples, u.id, u))
            s.returned = [by_id[uid] for uid in st["returned_ids"]]

    def save(self, path: str | Path) -> None:
        tensors = {name: p.detach() for name, p in self.model.named_parameters()}
        for key, t in self.optimizer.state_tensors().items():
            tensors[f"opt.{key}"] = t
        save_checkpoint(
            path,
            step=self.step,
            config=self.cfg,
            tensors=tensors,
            rng_states=self._rng_states(),
            extras={
                "opt_step": self.optimizer.t,
                "assembler": self._assembler_state(),
            },
        )

    def restore(self, ckpt: Checkpoint) -> None:
        own = dict(self.model.named_parameters())
        model_tensors = ckpt.model_tensors()
        missing = sorted(set(own) ^ set(model_tensors))
        if missing:
            raise ValueError(f"checkpoint/model tensor mismatch: {', '.join(missing)}")
        with torch.no_grad():
            for name, p in own.items():
                p.copy_(model_tensors[name].to(p.dtype))
        self.optimizer.load_state_tensors(ckpt.optimizer_tensors(), ckpt.extras["opt_step"])
        decode_rng_state(self.step_generator, ckpt.rng_states["step"])
        self._restore_assembler(ckpt.extras["assembler"])
        self.step = ckpt.step

    @classmethod
    def from_checkpoint(
        cls,
        path: str | Path,
        train_manifest: Manifest,
        val_manifest: Manifest,
        out_dir: str | Path | None = None,
    ) -> "SslTrainer":
        ckpt = load_checkpoint(path)
        trainer = cls(ckpt.config, train_manifest, val_manifest, out_dir=out_dir)
        trainer.restore(ckpt)
        if out_dir is not None and (Path(out_dir) / "metrics.csv").exists():
            history = read_metrics_csv(Path(out_dir) / "metrics.csv")
            trainer.records = [r for r in history if r.step <= ckpt.step]
            ledger_path = Path(out_dir) / "ledger.csv"
            if ledger_path.exists():
                with open(ledger_path, newline="") as f:
                    rows = list(csv.DictReader(f))
                trainer.ledger_rows = rows[: len(trainer.records)]
        return trainer

    # ---- orchestration ----

    def _flush(self) -> None:
        if self.out_dir is None:
            return
        write_metrics_csv(self.records, self.out_dir / "metrics.csv")
        write_ledger_csv(self.ledger_rows, self.out_dir / "ledger.csv")

    def _checkpoint_path(self) -> Path:
        return self.out_dir / f"step-{self.step:08d}.ckpt"

    def run(self, iterations: int | None = None) -> list[MetricRecord]:
        """Train to ``iterations`` (default: config), validating and
        checkpointing every ``validate_every`` steps plus once at step 0."""
        cfg = self.cfg
        target = iterations if iterations is not None else cfg.iterations
        if self.step == 0:
            self.validate()
            if self.out_dir is not None:
                self.save(self._checkpoint_path())
                self._flush()
        while self.step < target:
            self.train_step()
            if self.step % cfg.validate_every == 0 or self.step == target:
                self.validate()
                if self.out_dir is not None:
                    self.save(self._checkpoint_path())
                    self._flush()
        return self.records

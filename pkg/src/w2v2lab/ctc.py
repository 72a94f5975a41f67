"""Character recognition: CTC loss, greedy decoding, error rates, fine-tuning.

The CTC loss is the log-space forward algorithm over the blank-extended
label sequence, written in differentiable tensor ops so the same code
trains the head and is certified against exhaustive path enumeration.
Fine-tuning keeps the feature encoder frozen throughout and the context
network frozen for an initial span of steps, with a tri-stage
(warmup / hold / exponential decay) learning rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .batching import BatchAssembler, pad_and_collate
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import BLANK_ID, ID_TO_CHAR, Manifest, encode_transcript
from .model import AsrModel
from .numerics import new_generator
from .trainer import AdamW


def min_frames_for(targets: list[int]) -> int:
    """Shortest frame count that can align the target sequence: one frame
    per label plus a mandatory blank between adjacent repeats."""
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def ctc_loss(logits: torch.Tensor, targets: list[int], blank: int = BLANK_ID) -> torch.Tensor:
    """Negative log probability of all monotonic alignments of ``targets``.

    logits: (T, classes) unnormalized per-frame scores; a log-softmax is
    applied internally. Raises when the transcript is empty or cannot be
    aligned within T frames.
    """
    if len(targets) == 0:
        raise ValueError("empty transcript cannot be aligned")
    t_frames = logits.shape[0]
    if t_frames < min_frames_for(targets):
        raise ValueError(
            f"transcript needs at least {min_frames_for(targets)} frames, got {t_frames}"
        )
    log_probs = torch.log_softmax(logits, dim=-1)
    ext = [blank]
    for label in targets:
        ext.extend([label, blank])
    ext_t = torch.tensor(ext, dtype=torch.long)
    s = len(ext)
    # Unreachable lattice positions use a large finite negative instead of
    # -inf: exp() of it is exactly 0, but logsumexp backward stays NaN-free.
    neg = torch.tensor(-1e30, dtype=logits.dtype)
    head = [log_probs[0, ext[0]]]
    if s > 1:
        head.append(log_probs[0, ext[1]])
    alpha = torch.cat([torch.stack(head), neg.expand(s - len(head))])
    # A position may also inherit from two back when its label is neither
    # blank nor a repeat of the label two back.
    can_skip = torch.zeros(s, dtype=torch.bool)
    for i in range(2, s):
        can_skip[i] = ext[i] != blank and ext[i] != ext[i - 2]
    for t in range(1, t_frames):
        stay = alpha
        prev = torch.cat([neg.view(1), alpha[:-1]])
        skip = torch.cat([neg.expand(2), alpha[:-2]])
        skip = torch.where(can_skip, skip, neg)
        alpha = torch.logsumexp(torch.stack([stay, prev, skip]), dim=0) + log_probs[t, ext_t]
    total = torch.logsumexp(alpha[-2:], dim=0) if s > 1 else alpha[-1]
    return -total


def ctc_loss_brute_force(logits: torch.Tensor, targets: list[int], blank: int = BLANK_ID) -> float:
    """Independent oracle: enumerate every |classes|^T frame labeling and sum
    the probability of those that collapse to the target sequence."""
    import itertools

    if len(targets) == 0:
        raise ValueError("empty transcript cannot be aligned")
    probs = torch.softmax(logits.to(torch.float64), dim=-1)
    t_frames, classes = probs.shape
    total = 0.0
    for path in itertools.product(range(classes), repeat=t_frames):
        collapsed = []
        prev = None
        for label in path:
            if label != prev and label != blank:
                collapsed.append(label)
            prev = label
        if collapsed == list(targets):
            p = 1.0
            for t, label in enumerate(path):
                p *= float(probs[t, label])
            total += p
    if total == 0.0:
        raise ValueError("no alignment exists")
    return -math.log(total)


def greedy_decode(logits: torch.Tensor, blank: int = BLANK_ID) -> str:
    """Per-frame argmax, collapse repeats, drop blanks, map to characters."""
    ids = logits.argmax(dim=-1).tolist()
    out = []
    prev = None
    for label in ids:
        if label != prev and label != blank:
            out.append(ID_TO_CHAR[label])
        prev = label
    return "".join(out)


def edit_distance(a: list, b: list) -> int:
    """Levenshtein distance between two token sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, tok_b in enumerate(b, start=1):
            cur[j] = min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (tok_a != tok_b),
            )
        prev = cur
    return prev[-1]


def wer(reference: str, hypothesis: str) -> float:
    """Word error rate: word-level edit distance over reference word count."""
    ref_words = reference.split()
    if not ref_words:
        raise ValueError("reference has no words")
    return edit_distance(ref_words, hypothesis.split()) / len(ref_words)


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate over the raw reference characters."""
    if not reference:
        raise ValueError("reference is empty")
    return edit_distance(list(reference), list(hypothesis)) / len(reference)


@dataclass
class TriStageLr:
    total_steps: int
    base_lr: float = 5e-7
    peak_lr: float = 5e-5
    final_lr: float = 2.5e-6
    warmup_frac: float = 0.1
    hold_frac: float = 0.4

    def lr_at(self, step: int) -> float:
        if not (0 <= step <= self.total_steps):
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        warmup_end = self.warmup_frac * self.total_steps
        hold_end = (self.warmup_frac + self.hold_frac) * self.total_steps
        if step <= warmup_end:
            frac = step / warmup_end if warmup_end > 0 else 1.0
            return self.base_lr + (self.peak_lr - self.base_lr) * frac
        if step <= hold_end:
            return self.peak_lr
        span = self.total_steps - hold_end
        progress = (step - hold_end) / span
        return self.peak_lr * math.exp(math.log(self.final_lr / self.peak_lr) * progress)


@dataclass
class FreezePlan:
    context_frozen_steps: int
    encoder_frozen: bool = True  # throughout fine-tuning


@dataclass
class EvalResult:
    rows: list[dict]
    wer: float
    cer: float


def evaluate(model: AsrModel, manifest: Manifest, batch_seconds: float,
             max_spread_seconds: float = 10.0) -> EvalResult:
    """Greedy-decode a labeled manifest; corpus-level WER/CER plus one row
    per utterance. No masking, no dropout."""
    assembler = BatchAssembler(
        manifest, threshold_seconds=batch_seconds, seed=0, passes=1,
        max_spread_seconds=max_spread_seconds,
    )
    dtype = next(model.parameters()).dtype
    rows = []
    word_errors = 0
    word_count = 0
    char_errors = 0
    char_count = 0
    with torch.no_grad():
        for batch in assembler:
            waveforms, _, frame_lens = pad_and_collate(batch.utterances)
            wave_t = torch.from_numpy(waveforms).to(dtype)
            lens_t = torch.from_numpy(frame_lens)
            logits = model(wave_t, lens_t, generator=None, training=False)
            for i, utt in enumerate(batch.utterances):
                if utt.transcript is None:
                    raise ValueError(f"utterance {utt.id} has no transcript to evaluate against")
                hyp = greedy_decode(logits[i, : int(frame_lens[i])])
                ref = utt.transcript
                u_wer = wer(ref, hyp)
                u_cer = cer(ref, hyp)
                rows.append(
                    {"id": utt.id, "reference": ref, "hypothesis": hyp,
                     "cer": u_cer, "wer": u_wer}
                )
                word_errors += edit_distance(ref.split(), hyp.split())
                word_count += len(ref.split())
                char_errors += edit_distance(list(ref), list(hyp))
                char_count += len(ref)
    rows.sort(key=lambda r: r["id"])
    return EvalResult(rows=rows, wer=word_errors / word_count, cer=char_errors / char_count)


EVAL_FIELDS = ["id", "reference", "hypothesis", "cer", "wer"]


def write_eval_csv(result: EvalResult, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=EVAL_FIELDS)
        writer.writeheader()
        writer.writerows(result.rows)
        writer.writerow(
            {"id": "SUMMARY", "reference": "", "hypothesis": "", "cer": result.cer, "wer": result.wer}
        )


class CtcFinetuner:
    """Fine-tunes (or trains from scratch) the recognition model with CTC."""

    def __init__(
        self,
        cfg: RunConfig,
        train_manifest: Manifest,
        val_manifest: Manifest,
        init_checkpoint: str | Path | None = None,
        out_dir: str | Path | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dtype = cfg.torch_dtype()
        self.model = AsrModel(cfg, new_generator(cfg.seed))
        if init_checkpoint is not None:
            ckpt = load_checkpoint(init_checkpoint)
            self.model.load_pretrained(ckpt.model_tensors())
        self.freeze_plan = FreezePlan(context_frozen_steps=cfg.ft_freeze_steps)
        for p in self.model.encoder.parameters():
            p.requires_grad_(False)
        self._context_frozen = None  # set by _apply_freeze
        self._apply_freeze(step=0)
        self.optimizer = AdamW(
            dict(self.model.named_parameters()),
            beta1=cfg.adam_beta1,
            beta2=cfg.adam_beta2,
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )
        self.schedule = TriStageLr(
            total_steps=cfg.ft_steps,
            base_lr=cfg.ft_base_lr,
            peak_lr=cfg.ft_peak_lr,
            final_lr=cfg.ft_final_lr,
            warmup_frac=cfg.ft_warmup_frac,
            hold_frac=cfg.ft_hold_frac,
        )
        self.step_generator = new_generator(cfg.seed + 1)
        self.assembler = BatchAssembler(
            train_manifest,
            threshold_seconds=cfg.ft_batch_seconds,
            seed=cfg.seed + 2,
            bin_size=cfg.bin_size,
            queue_size=cfg.queue_size,
            max_spread_seconds=cfg.max_spread_seconds,
            passes=None,
        )
        self.val_manifest = val_manifest
        self.step = 0
        self.history: list[tuple[int, float, float]] = []  # step, lr, train loss

    def _apply_freeze(self, step: int) -> None:
        frozen = step < self.freeze_plan.context_frozen_steps
        if frozen == self._context_frozen:
            return
        self._context_frozen = frozen
        for p in self.model.context.parameters():
            p.requires_grad_(not frozen)

    def train_step(self) -> float:
        self._apply_freeze(self.step)
        lr = self.schedule.lr_at(self.step)
        batch = self.assembler.next_gpu_batch()
        waveforms, _, frame_lens = pad_and_collate(batch.utterances)
        wave_t = torch.from_numpy(waveforms).to(self.dtype)
        lens_t = torch.from_numpy(frame_lens)
        logits = self.model(wave_t, lens_t, generator=self.step_generator, training=True)
        losses = []
        for i, utt in enumerate(batch.utterances):
            if utt.transcript is None:
                raise ValueError(f"utterance {utt.id} has no transcript for CTC")
            targets = encode_transcript(utt.transcript)
            losses.append(ctc_loss(logits[i, : int(frame_lens[i])], targets))
        loss = torch.stack(losses).mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite CTC loss at fine-tuning step {self.step}")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step(lr)
        self.step += 1
        return value

    def run(self, steps: int | None = None, log_every: int = 100) -> None:
        target = steps if steps is not None else self.cfg.ft_steps
        while self.step < target:
            loss = self.train_step()
            if self.step % log_every == 0 or self.step == target:
                self.history.append((self.step, self.schedule.lr_at(self.step - 1), loss))

    def evaluate(self) -> EvalResult:
        return evaluate(
            self.model, self.val_manifest, self.cfg.ft_batch_seconds,
            max_spread_seconds=self.cfg.max_spread_seconds,
        )

    def save(self, path: str | Path) -> None:
        tensors = {name: p.detach() for name, p in self.model.named_parameters()}
        save_checkpoint(
            path,
            step=self.step,
            config=self.cfg,
            tensors=tensors,
            rng_states={},
            extras={"kind": "asr"},
        )

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "lr", "train_ctc_loss"])
            writer.writerows([(s, repr(lr), repr(loss)) for s, lr, loss in self.history])


def load_asr_model(path: str | Path) -> AsrModel:
    ckpt = load_checkpoint(path)
    model = AsrModel(ckpt.config, new_generator(ckpt.config.seed))
    own = dict(model.named_parameters())
    tensors = ckpt.model_tensors()
    missing = sorted(set(own) ^ set(tensors))
    if missing:
        raise ValueError(f"checkpoint is not a recognition model; mismatched tensors: {missing[:5]}")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(tensors[name].to(p.dtype))
    return model

"""Length-binned gpu-batch assembly and data-seen accounting.

Utterances are sorted by duration into bins of 5000. Each gpu-batch comes
from a single bin: random samples from the bin top up a 50-slot priority
queue, and the batch pops shortest-first until the accumulated true speech
reaches the threshold (the crossing utterance is included). A batch whose
duration spread exceeds 10 seconds is discarded and its utterances
returned to the sampling pool. Sampling cycles through shuffled passes of
the bin, so repeat counts per utterance stay within one of each other.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Manifest, Utterance, load_waveform
from .feature_encoder import SAMPLES_PER_FRAME

BIN_SIZE = 5000
QUEUE_SIZE = 50
MAX_SPREAD_SECONDS = 10.0
_MAX_DISCARD_RETRIES = 25


@dataclass
class GpuBatch:
    """One assembled batch.

    ``is_remnant`` marks batches delivered outside the normal rules so no
    utterance is ever lost: the tail of a drained bin (below the duration
    threshold) or a leftover mix whose spread cannot be fixed by redrawing.
    """

    utterances: list[Utterance]
    bin_id: int
    is_remnant: bool = False

    @property
    def total_speech_seconds(self) -> float:
        return sum(u.duration_seconds for u in self.utterances)

    @property
    def spread_seconds(self) -> float:
        durs = [u.duration_seconds for u in self.utterances]
        return max(durs) - min(durs)

    def __len__(self) -> int:
        return len(self.utterances)


def make_bins(manifest: Manifest, bin_size: int = BIN_SIZE) -> list[list[Utterance]]:
    """Sort ascending by duration and chunk into bins (last one smaller)."""
    if len(manifest) == 0:
        raise ValueError("cannot bin an empty manifest")
    ordered = sorted(manifest.entries, key=lambda u: (u.num_samples, u.id))
    return [ordered[i : i + bin_size] for i in range(0, len(ordered), bin_size)]


def pad_and_collate(utterances: list[Utterance]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Load, zero-pad, and stack waveforms.

    Returns (waveforms (B, max_samples), sample_lens (B,), frame_lens (B,))
    where frame_lens holds the valid latent counts floor(r / 320) computed
    from true lengths, not from the padded width.
    """
    if not utterances:
        raise ValueError("empty utterance list")
    lens = np.array([u.num_samples for u in utterances], dtype=np.int64)
    out = np.zeros((len(utterances), int(lens.max())), dtype=np.float64)
    for i, u in enumerate(utterances):
        wav = load_waveform(u.path)
        if wav.shape[0] != u.num_samples:
            raise ValueError(
                f"{u.path}: manifest says {u.num_samples} samples, file has {wav.shape[0]}"
            )
        out[i, : wav.shape[0]] = wav
    frame_lens = lens // SAMPLES_PER_FRAME
    return out, lens, frame_lens


def data_seen(
    batch_seconds: float, iterations: int, dataset_hours: float = 912.0
) -> tuple[float, float]:
    """Upper-bound hours of speech seen and the equivalent epoch count."""
    if batch_seconds < 0 or iterations < 0:
        raise ValueError("batch_seconds and iterations must be non-negative")
    hours_upper = batch_seconds * iterations / 3600.0
    epochs_upper = hours_upper / dataset_hours
    return hours_upper, epochs_upper


@dataclass
class DataSeenLedger:
    """Cumulative accounting of delivered (not discarded) batches."""

    threshold_seconds: float
    batches_delivered: int = 0
    measured_seconds: float = 0.0
    repeats: dict[str, int] = field(default_factory=dict)

    @property
    def upper_bound_seconds(self) -> float:
        return self.batches_delivered * self.threshold_seconds

    @property
    def max_repeats(self) -> int:
        return max(self.repeats.values(), default=0)

    def record(self, batch: GpuBatch) -> None:
        self.batches_delivered += 1
        self.measured_seconds += batch.total_speech_seconds
        for u in batch.utterances:
            self.repeats[u.id] = self.repeats.get(u.id, 0) + 1

    def row(self) -> dict[str, float | int]:
        return {
            "iteration": self.batches_delivered,
            "upper_bound_seconds": self.upper_bound_seconds,
            "measured_seconds": self.measured_seconds,
            "max_repeats": self.max_repeats,
        }


LEDGER_FIELDS = ["iteration", "upper_bound_seconds", "measured_seconds", "max_repeats"]


def write_ledger_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LEDGER_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


class _BinSampler:
    """Shuffled traversal of one bin feeding a shortest-first heap.

    ``max_passes=None`` re-traverses forever (training); an integer makes
    exactly that many full traversals and then drains the heap.
    """

    def __init__(
        self,
        bin_id: int,
        utterances: list[Utterance],
        rng: np.random.Generator,
        queue_size: int,
        max_passes: int | None,
    ):
        self.bin_id = bin_id
        self.utterances = utterances
        self.rng = rng
        self.queue_size = queue_size
        self.max_passes = max_passes
        self.order: list[int] = []
        self.pos = 0
        self.passes_started = 0
        self.heap: list[tuple[int, str, Utterance]] = []
        self.returned: list[Utterance] = []

    def _next_item(self) -> Utterance | None:
        if self.pos < len(self.order):
            u = self.utterances[self.order[self.pos]]
            self.pos += 1
            return u
        if self.returned:
            # Utterances from discarded batches re-enter once the pass that
            # drew them is spent, keeping per-pass repeat counts fair.
            i = int(self.rng.integers(len(self.returned)))
            return self.returned.pop(i)
        if self.max_passes is not None and self.passes_started >= self.max_passes:
            return None
        self.order = self.rng.permutation(len(self.utterances)).tolist()
        self.pos = 0
        self.passes_started += 1
        return self._next_item()

    def _refill(self) -> None:
        while len(self.heap) < self.queue_size:
            u = self._next_item()
            if u is None:
                return
            heapq.heappush(self.heap, (u.num_samples, u.id, u))

    def next_batch(self, threshold_seconds: float, max_spread: float) -> GpuBatch | None:
        """One delivered batch, retrying internally past spread discards.

        When redrawing cannot produce a spread-conformant batch (the pool
        only offers incompatible durations), the offending batch is
        delivered flagged as a remnant instead of looping or dropping data.
        """
        for attempt in range(_MAX_DISCARD_RETRIES):
            self._refill()
            if not self.heap:
                return None
            chosen: list[Utterance] = []
            total = 0.0
            while total < threshold_seconds:
                if not self.heap:
                    self._refill()
                    if not self.heap:
                        break
                _, _, u = heapq.heappop(self.heap)
                chosen.append(u)
                total += u.duration_seconds
            remnant = total < threshold_seconds
            durs = [u.duration_seconds for u in chosen]
            spread_ok = max(durs) - min(durs) <= max_spread
            if spread_ok:
                return GpuBatch(utterances=chosen, bin_id=self.bin_id, is_remnant=remnant)
            if remnant or attempt == _MAX_DISCARD_RETRIES - 1:
                # The remaining pool cannot produce a conformant batch by
                # redrawing; deliver flagged rather than lose utterances.
                return GpuBatch(utterances=chosen, bin_id=self.bin_id, is_remnant=True)
            self.returned.extend(chosen)
        raise AssertionError("unreachable")


class BatchAssembler:
    """Single-owner iterator over gpu-batches drawn bin by bin.

    With ``passes=None`` (training) the assembler never runs dry: bins are
    re-traversed in fresh shuffled passes. With ``passes=k`` it performs
    exactly k traversals of every bin, drains completely (every utterance
    delivered exactly k times), and stops, emitting trailing remnant
    batches so nothing is lost.
    """

    def __init__(
        self,
        manifest: Manifest,
        threshold_seconds: float,
        seed: int,
        bin_size: int = BIN_SIZE,
        queue_size: int = QUEUE_SIZE,
        max_spread_seconds: float = MAX_SPREAD_SECONDS,
        passes: int | None = None,
    ):
        if threshold_seconds <= 0:
            raise ValueError("threshold_seconds must be positive")
        if passes is not None and passes < 1:
            raise ValueError("passes must be None (infinite) or >= 1")
        self.threshold_seconds = threshold_seconds
        self.max_spread_seconds = max_spread_seconds
        self.rng = np.random.default_rng(seed)
        bins = make_bins(manifest, bin_size=bin_size)
        self.samplers = [
            _BinSampler(i, b, np.random.default_rng(int(self.rng.integers(2**63))), queue_size, passes)
            for i, b in enumerate(bins)
        ]
        self.passes = passes
        self.ledger = DataSeenLedger(threshold_seconds=threshold_seconds)
        self._done: set[int] = set()

    def __iter__(self):
        return self

    def __next__(self) -> GpuBatch:
        batch = self.next_gpu_batch()
        if batch is None:
            raise StopIteration
        return batch

    def next_gpu_batch(self) -> GpuBatch | None:
        while True:
            alive = [s for s in self.samplers if s.bin_id not in self._done]
            if not alive:
                return None
            weights = np.array([len(s.utterances) for s in alive], dtype=np.float64)
            pick = int(self.rng.choice(len(alive), p=weights / weights.sum()))
            batch = alive[pick].next_batch(self.threshold_seconds, self.max_spread_seconds)
            if batch is None:
                self._done.add(alive[pick].bin_id)
                continue
            self.ledger.record(batch)
            return batch

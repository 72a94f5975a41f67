"""Audio ingestion: manifests, WAV files, validation splits, synthetic corpus.

Audio is fixed to 16 kHz mono PCM16 WAV; samples are normalized to
[-1, 1] floats on load. The synthetic corpus maps every transcript
character onto a fixed-frequency tone segment plus background noise, so
both the contrastive pretext task and CTC have recoverable structure
without any real speech data.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16_000
MIN_SAMPLES = 13_280  # 0.83 s
MAX_SAMPLES = 480_000  # 30 s

# CTC alphabet: blank is always index 0, then letters, space, apostrophe.
CHARACTERS = "abcdefghijklmnopqrstuvwxyz '"
BLANK_ID = 0
CHAR_TO_ID = {c: i + 1 for i, c in enumerate(CHARACTERS)}
ID_TO_CHAR = {i + 1: c for i, c in enumerate(CHARACTERS)}
NUM_CLASSES = len(CHARACTERS) + 1


class ManifestError(ValueError):
    """Raised for malformed or out-of-contract manifest rows."""


@dataclass(frozen=True)
class Utterance:
    id: str
    path: str
    num_samples: int
    transcript: str | None = None

    @property
    def duration_seconds(self) -> float:
        return self.num_samples / SAMPLE_RATE


@dataclass
class Manifest:
    entries: list[Utterance] = field(default_factory=list)
    subset: str = "train"

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def total_seconds(self) -> float:
        return sum(u.duration_seconds for u in self.entries)


def _check_bounds(num_samples: int, where: str) -> None:
    if not (MIN_SAMPLES <= num_samples <= MAX_SAMPLES):
        raise ManifestError(
            f"{where}: num_samples {num_samples} outside allowed range "
            f"[{MIN_SAMPLES}, {MAX_SAMPLES}] samples (0.83 s to 30 s at 16 kHz)"
        )


def load_manifest(path: str | Path, subset: str = "train", check_files: bool = True) -> Manifest:
    """Parse a TSV manifest: ``id<TAB>path<TAB>num_samples<TAB>transcript``.

    The transcript column may be empty. Durations are taken from the
    num_samples column, never by decoding audio. Malformed rows raise
    :class:`ManifestError` with the 1-based line number.
    """
    path = Path(path)
    entries: list[Utterance] = []
    seen_ids: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        utt_id, audio_path, num_samples_str, transcript = parts
        try:
            num_samples = int(num_samples_str)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: num_samples {num_samples_str!r} is not an integer") from None
        _check_bounds(num_samples, f"{path}:{lineno}")
        if utt_id in seen_ids:
            raise ManifestError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
        seen_ids.add(utt_id)
        resolved = Path(audio_path)
        if not resolved.is_absolute():
            resolved = path.parent / resolved
        if check_files and not resolved.exists():
            raise ManifestError(f"{path}:{lineno}: audio file {resolved} does not exist")
        entries.append(
            Utterance(
                id=utt_id,
                path=str(resolved),
                num_samples=num_samples,
                transcript=transcript if transcript else None,
            )
        )
    return Manifest(entries=entries, subset=subset)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    lines = []
    for u in manifest.entries:
        lines.append(f"{u.id}\t{u.path}\t{u.num_samples}\t{u.transcript or ''}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def split_validation(
    manifest: Manifest, fraction: float, rng: np.random.Generator
) -> tuple[Manifest, Manifest]:
    """Randomly split off ``round(fraction * N)`` utterances for validation.

    Deterministic under the generator state; the two halves partition the
    input. An empty validation half (tiny manifests) is allowed.
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(manifest)
    n_val = int(round(fraction * n))
    order = rng.permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [u for i, u in enumerate(manifest.entries) if i not in val_idx]
    val = [u for i, u in enumerate(manifest.entries) if i in val_idx]
    return (
        Manifest(entries=train, subset=manifest.subset),
        Manifest(entries=val, subset=f"{manifest.subset}-val"),
    )


def load_waveform(path: str | Path) -> np.ndarray:
    """Read a 16 kHz mono PCM16 WAV into float64 samples in [-1, 1]."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got sample width {w.getsampwidth()}")
        if w.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()}")
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return samples / 32768.0


def save_waveform(path: str | Path, samples: np.ndarray) -> None:
    """Write float samples in [-1, 1] as a 16 kHz mono PCM16 WAV."""
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


# Tone synthesis: each character gets its own frequency so a Fourier probe
# (and the models) can tell characters apart.
TONE_SAMPLES_PER_CHAR = 2560  # 0.16 s = 8 latent frames per character
_TONE_BASE_HZ = 220.0
_TONE_STEP = 1.11


def char_frequency(ch: str) -> float:
    """Fixed per-character tone frequency, geometrically spaced from 220 Hz."""
    idx = CHAR_TO_ID[ch] - 1
    return _TONE_BASE_HZ * (_TONE_STEP**idx)


def render_transcript(
    transcript: str, num_samples: int, rng: np.random.Generator, noise_level: float = 0.03
) -> np.ndarray:
    """Render a transcript as consecutive tone segments centered in
    ``num_samples`` samples of background noise."""
    out = rng.normal(0.0, noise_level, size=num_samples)
    body = len(transcript) * TONE_SAMPLES_PER_CHAR
    if body > num_samples:
        raise ValueError(f"transcript of {len(transcript)} chars does not fit in {num_samples} samples")
    lead = (num_samples - body) // 2
    t = np.arange(TONE_SAMPLES_PER_CHAR) / SAMPLE_RATE
    # Short cosine ramps avoid clicks at segment boundaries.
    ramp = min(160, TONE_SAMPLES_PER_CHAR // 4)
    envelope = np.ones(TONE_SAMPLES_PER_CHAR)
    envelope[:ramp] = 0.5 * (1 - np.cos(np.pi * np.arange(ramp) / ramp))
    envelope[-ramp:] = envelope[:ramp][::-1]
    for i, ch in enumerate(transcript):
        freq = char_frequency(ch)
        phase = rng.uniform(0.0, 2 * np.pi)
        seg = 0.5 * np.sin(2 * np.pi * freq * t + phase) * envelope
        start = lead + i * TONE_SAMPLES_PER_CHAR
        out[start : start + TONE_SAMPLES_PER_CHAR] += seg
    return np.clip(out, -1.0, 1.0)


def synth_corpus(
    seed: int,
    count: int,
    out_dir: str | Path,
    min_dur: float = 2.0,
    max_dur: float = 8.0,
    vocab: str = CHARACTERS,
    subset: str = "train",
) -> Manifest:
    """Generate ``count`` WAV utterances plus a manifest, bit-identical under seed.

    Durations are drawn uniformly from [min_dur, max_dur]; the transcript
    length is whatever number of tone segments fits, with the remainder
    left as noise so durations are not quantized to the segment grid.
    """
    if not vocab:
        raise ValueError("vocab must be nonempty")
    if not (MIN_SAMPLES / SAMPLE_RATE <= min_dur <= max_dur <= MAX_SAMPLES / SAMPLE_RATE):
        raise ValueError(
            f"duration bounds [{min_dur}, {max_dur}] must lie inside "
            f"[{MIN_SAMPLES / SAMPLE_RATE}, {MAX_SAMPLES / SAMPLE_RATE}] seconds"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Letters only in generated transcripts; space/apostrophe stay available
    # as vocabulary but a leading/trailing space would be invisible in text.
    usable = [c for c in vocab if c not in " '"] or list(vocab)
    entries = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        num_samples = int(rng.integers(int(min_dur * SAMPLE_RATE), int(max_dur * SAMPLE_RATE) + 1))
        n_chars = max(1, num_samples // TONE_SAMPLES_PER_CHAR - 1)
        transcript = "".join(rng.choice(usable, size=n_chars))
        samples = render_transcript(transcript, num_samples, rng)
        utt_id = f"{subset}-{seed}-{i:05d}"
        wav_path = out_dir / f"{utt_id}.wav"
        save_waveform(wav_path, samples)
        entries.append(
            Utterance(id=utt_id, path=str(wav_path), num_samples=num_samples, transcript=transcript)
        )
    manifest = Manifest(entries=entries, subset=subset)
    save_manifest(manifest, out_dir / f"{subset}.tsv")
    return manifest


def encode_transcript(transcript: str) -> list[int]:
    """Map a transcript to CTC class ids (no blanks)."""
    try:
        return [CHAR_TO_ID[c] for c in transcript]
    except KeyError as e:
        raise ValueError(f"transcript contains unsupported character {e.args[0]!r}") from None


def decode_ids(ids: list[int]) -> str:
    return "".join(ID_TO_CHAR[i] for i in ids)

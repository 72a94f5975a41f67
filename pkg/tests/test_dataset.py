import numpy as np
import pytest

from w2v2lab.dataset import (
    CHARACTERS,
    MAX_SAMPLES,
    MIN_SAMPLES,
    SAMPLE_RATE,
    TONE_SAMPLES_PER_CHAR,
    Manifest,
    ManifestError,
    Utterance,
    char_frequency,
    decode_ids,
    encode_transcript,
    load_manifest,
    load_waveform,
    render_transcript,
    save_manifest,
    save_waveform,
    split_validation,
    synth_corpus,
)


def write_rows(path, rows):
    path.write_text("\n".join("\t".join(str(c) for c in row) for row in rows) + "\n")


class TestManifest:
    def test_three_row_round_trip(self, tmp_path):
        for name in ("a.wav", "b.wav", "c.wav"):
            save_waveform(tmp_path / name, np.zeros(16000))
        rows = [
            ("u1", "a.wav", 16000, "hello"),
            ("u2", "b.wav", 32000, ""),
            ("u3", "c.wav", 48000, "b c"),
        ]
        write_rows(tmp_path / "m.tsv", rows)
        manifest = load_manifest(tmp_path / "m.tsv")
        assert len(manifest) == 3
        assert manifest.entries[1].transcript is None
        save_manifest(manifest, tmp_path / "copy.tsv")
        again = load_manifest(tmp_path / "copy.tsv")
        assert again.entries == manifest.entries

    def test_empty_file_is_valid(self, tmp_path):
        (tmp_path / "m.tsv").write_text("")
        assert len(load_manifest(tmp_path / "m.tsv")) == 0

    def test_too_short_rejected_naming_bound(self, tmp_path):
        save_waveform(tmp_path / "a.wav", np.zeros(1000))
        write_rows(tmp_path / "m.tsv", [("u1", "a.wav", 1000, "x")])
        with pytest.raises(ManifestError, match=str(MIN_SAMPLES)):
            load_manifest(tmp_path / "m.tsv")

    def test_too_long_rejected(self, tmp_path):
        write_rows(tmp_path / "m.tsv", [("u1", "a.wav", MAX_SAMPLES + 1, "x")])
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.tsv")

    def test_malformed_row_reports_line_number(self, tmp_path):
        (tmp_path / "m.tsv").write_text("only two\tfields\n")
        with pytest.raises(ManifestError, match=":1:"):
            load_manifest(tmp_path / "m.tsv")

    def test_missing_file_rejected(self, tmp_path):
        write_rows(tmp_path / "m.tsv", [("u1", "missing.wav", 16000, "x")])
        with pytest.raises(ManifestError, match="does not exist"):
            load_manifest(tmp_path / "m.tsv")

    def test_duplicate_id_rejected(self, tmp_path):
        save_waveform(tmp_path / "a.wav", np.zeros(16000))
        write_rows(tmp_path / "m.tsv", [("u1", "a.wav", 16000, ""), ("u1", "a.wav", 16000, "")])
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(tmp_path / "m.tsv")


class TestSplitValidation:
    def entries(self, n):
        return Manifest(
            entries=[Utterance(id=f"u{i}", path="x", num_samples=16000 + i) for i in range(n)]
        )

    def test_five_percent_split(self):
        train, val = split_validation(self.entries(100), 0.05, np.random.default_rng(0))
        assert (len(train), len(val)) == (95, 5)

    def test_rounding_to_zero_keeps_everything(self):
        train, val = split_validation(self.entries(10), 0.01, np.random.default_rng(0))
        assert (len(train), len(val)) == (10, 0)

    def test_deterministic_under_seed(self):
        m = self.entries(50)
        a = split_validation(m, 0.2, np.random.default_rng(42))
        b = split_validation(m, 0.2, np.random.default_rng(42))
        assert [u.id for u in a[0]] == [u.id for u in b[0]]
        assert [u.id for u in a[1]] == [u.id for u in b[1]]

    def test_partition_property(self):
        m = self.entries(37)
        train, val = split_validation(m, 0.3, np.random.default_rng(1))
        train_ids = {u.id for u in train}
        val_ids = {u.id for u in val}
        assert train_ids | val_ids == {u.id for u in m}
        assert train_ids & val_ids == set()

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            split_validation(self.entries(5), 1.0, np.random.default_rng(0))


class TestWavRoundTrip:
    def test_round_trip_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = rng.uniform(-0.9, 0.9, size=5000)
        save_waveform(tmp_path / "x.wav", samples)
        back = load_waveform(tmp_path / "x.wav")
        assert back.shape == samples.shape
        assert np.abs(back - samples).max() < 1.0 / 32768.0


class TestSynthCorpus:
    def test_count_and_duration_bounds(self, tmp_path):
        manifest = synth_corpus(seed=1, count=10, out_dir=tmp_path, min_dur=2.0, max_dur=4.0)
        assert len(manifest) == 10
        for u in manifest:
            assert 2.0 <= u.duration_seconds <= 4.0
            assert (tmp_path / f"{u.id}.wav").exists()
            assert u.transcript

    def test_bit_identical_under_seed(self, tmp_path):
        a = synth_corpus(seed=5, count=3, out_dir=tmp_path / "a", min_dur=2.0, max_dur=3.0)
        b = synth_corpus(seed=5, count=3, out_dir=tmp_path / "b", min_dur=2.0, max_dur=3.0)
        for ua, ub in zip(a, b):
            assert ua.num_samples == ub.num_samples
            assert ua.transcript == ub.transcript
            wav_a = (tmp_path / "a" / f"{ua.id}.wav").read_bytes()
            wav_b = (tmp_path / "b" / f"{ub.id}.wav").read_bytes()
            assert wav_a == wav_b

    def test_rejects_empty_vocab(self, tmp_path):
        with pytest.raises(ValueError):
            synth_corpus(seed=0, count=1, out_dir=tmp_path, vocab="")

    def test_rejects_out_of_range_durations(self, tmp_path):
        with pytest.raises(ValueError):
            synth_corpus(seed=0, count=1, out_dir=tmp_path, min_dur=0.1, max_dur=2.0)

    def test_two_characters_give_two_spectral_peaks(self):
        # Fourier probe: each rendered segment's dominant frequency must be
        # the character's assigned tone.
        rng = np.random.default_rng(3)
        n = 4 * TONE_SAMPLES_PER_CHAR
        samples = render_transcript("ab", n, rng, noise_level=0.01)
        lead = (n - 2 * TONE_SAMPLES_PER_CHAR) // 2
        freqs = []
        for i in range(2):
            seg = samples[lead + i * TONE_SAMPLES_PER_CHAR : lead + (i + 1) * TONE_SAMPLES_PER_CHAR]
            spectrum = np.abs(np.fft.rfft(seg))
            spectrum[0] = 0.0
            freqs.append(np.fft.rfftfreq(len(seg), d=1.0 / SAMPLE_RATE)[spectrum.argmax()])
        assert freqs[0] == pytest.approx(char_frequency("a"), rel=0.02)
        assert freqs[1] == pytest.approx(char_frequency("b"), rel=0.02)
        assert freqs[0] != pytest.approx(freqs[1], rel=0.02)

    def test_durations_cover_range_uniformly(self, tmp_path):
        # Kolmogorov-Smirnov sanity check against Uniform(min, max).
        from scipy import stats

        manifest = synth_corpus(seed=9, count=1000, out_dir=tmp_path, min_dur=2.0, max_dur=8.0)
        durs = np.array([u.duration_seconds for u in manifest])
        result = stats.kstest(durs, stats.uniform(loc=2.0, scale=6.0).cdf)
        assert result.pvalue > 0.01


class TestVocab:
    def test_vocab_contents(self):
        assert len(CHARACTERS) == 28
        assert " " in CHARACTERS and "'" in CHARACTERS

    def test_encode_decode_round_trip(self):
        text = "hello world's"
        assert decode_ids(encode_transcript(text)) == text

    def test_encode_rejects_unknown(self):
        with pytest.raises(ValueError):
            encode_transcript("Hello")

import numpy as np
import pytest
import torch

from conftest import tiny_config
from w2v2lab.batching import BatchAssembler
from w2v2lab.dataset import synth_corpus, split_validation
from w2v2lab.grad_probe import (
    batch_gradient,
    probe,
    probe_gradients,
    variance_summary,
    write_probe_csv,
)
from w2v2lab.model import SslModel
from w2v2lab.numerics import new_generator
from w2v2lab.trainer import SslTrainer

F64 = torch.float64


class TestVarianceSummary:
    def test_identical_gradients_zero_std(self):
        g = torch.randn(10, dtype=F64, generator=new_generator(0))
        avg_std, n = variance_summary([g.clone() for _ in range(10)])
        assert avg_std == 0.0
        assert n == 10

    def test_matches_closed_form_sample_variance(self):
        # 1-parameter model with hand-set per-batch gradients 1, 2, 3:
        # unbiased variance 1.0 -> std 1.0
        vecs = [torch.tensor([v], dtype=F64) for v in (1.0, 2.0, 3.0)]
        avg_std, _ = variance_summary(vecs)
        assert avg_std == pytest.approx(1.0, abs=1e-12)

    def test_scaling_gradients_scales_std_exactly(self, gen):
        vecs = [torch.randn(6, dtype=F64, generator=gen) for _ in range(5)]
        base, _ = variance_summary(vecs)
        scaled, _ = variance_summary([-3.0 * v for v in vecs])
        assert scaled == pytest.approx(3.0 * base, rel=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            variance_summary([torch.zeros(2, dtype=F64)])


@pytest.fixture(scope="module")
def probe_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("probe")
    manifest = synth_corpus(seed=4, count=16, out_dir=root / "d", min_dur=1.0, max_dur=2.0)
    train, val = split_validation(manifest, 0.2, np.random.default_rng(4))
    cfg = tiny_config(batch_seconds=2.0, val_batch_seconds=2.0, iterations=4,
                      validate_every=2, mask_span=2)
    trainer = SslTrainer(cfg, train, val, out_dir=root / "run")
    trainer.run()
    ckpt = root / "run" / "step-00000004.ckpt"
    return train, cfg, ckpt


class TestProbe:
    def test_report_fields_and_determinism(self, probe_setup):
        train, cfg, ckpt = probe_setup
        a = probe(ckpt, train, n_batches=4, seed=3)
        b = probe(ckpt, train, n_batches=4, seed=3)
        assert a.step == 4
        assert a.batch_seconds == cfg.batch_seconds
        assert a.n_batches == 4
        assert a.avg_std == b.avg_std
        assert a.avg_std > 0.0

    def test_model_and_grads_left_untouched(self, probe_setup):
        train, cfg, ckpt = probe_setup
        model = SslModel(cfg, new_generator(cfg.seed))
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        assembler = BatchAssembler(train, cfg.gpu_batch_seconds, seed=5,
                                   bin_size=cfg.bin_size, passes=None)
        groups = [[assembler.next_gpu_batch()] for _ in range(3)]
        probe_gradients(model, groups, tau=2.0, seed=1)
        for n, p in model.named_parameters():
            assert torch.equal(p.detach(), before[n]), n
            assert p.grad is None

    def test_rejects_single_batch(self, probe_setup):
        train, _, ckpt = probe_setup
        with pytest.raises(ValueError):
            probe(ckpt, train, n_batches=1, seed=0)

    def test_csv_export(self, probe_setup, tmp_path):
        train, _, ckpt = probe_setup
        report = probe(ckpt, train, n_batches=2, seed=0)
        write_probe_csv([report], tmp_path / "gradvar.csv")
        text = (tmp_path / "gradvar.csv").read_text().splitlines()
        assert text[0] == "step,batch_seconds,avg_std,n_batches"
        assert text[1].startswith("4,")

    def test_forced_identical_batches_give_zero_std(self, probe_setup, gen):
        train, cfg, _ = probe_setup
        model = SslModel(cfg, new_generator(0))
        assembler = BatchAssembler(train, cfg.gpu_batch_seconds, seed=5,
                                   bin_size=cfg.bin_size, passes=None)
        batch = assembler.next_gpu_batch()
        # same batch, same noise stream -> identical gradients
        vecs = [batch_gradient(model, [batch], 2.0, new_generator(42)) for _ in range(3)]
        avg_std, _ = variance_summary(vecs)
        assert avg_std == 0.0

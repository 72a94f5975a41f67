import math

import pytest
import torch

from w2v2lab.numerics import finite_diff_grad, new_generator, relative_error
from w2v2lab.quantizer import (
    GumbelQuantizer,
    QuantizerConfig,
    TempSchedule,
    codebook_similarity_stats,
)

F64 = torch.float64


def make_quantizer(**kwargs):
    cfg = QuantizerConfig(**{"input_dim": 6, "num_entries": 4, "entry_dim": 3, **kwargs})
    return GumbelQuantizer(cfg, F64, new_generator(0))


class TestQuantize:
    def test_canonical_codebook_count(self):
        cfg = QuantizerConfig()
        assert cfg.num_entries**2 == 102_400
        assert cfg.quantized_dim == 256

    def test_hard_selection_copies_codebook_rows(self, gen):
        q = make_quantizer()
        z = torch.randn(5, 6, dtype=F64, generator=gen)
        out = q.quantize(z, tau=1.0, generator=gen)
        entries = q.entries.detach()
        for t in range(5):
            first, second = out.quantized[t, :3], out.quantized[t, 3:]
            assert any(torch.equal(first, entries[0, v]) for v in range(4))
            assert any(torch.equal(second, entries[1, v]) for v in range(4))

    def test_toy_two_entry_selection_is_exact_copy(self):
        cfg = QuantizerConfig(input_dim=1, num_entries=2, entry_dim=1)
        q = GumbelQuantizer(cfg, F64, new_generator(0))
        with torch.no_grad():
            q.entries[0, 0, 0] = 5.0
            q.entries[0, 1, 0] = 9.0
            # force selection of entry 1 in codebook 0
            q.classifier_weight.zero_()
            q.classifier_bias.zero_()
            q.classifier_bias[0, 1] = 1e9
        out = q.quantize(torch.zeros(1, 1, dtype=F64), tau=1.0, generator=new_generator(1))
        assert float(out.quantized.detach()[0, 0]) == 9.0

    def test_probs_are_noise_free_softmax_rows(self, gen):
        q = make_quantizer()
        z = torch.randn(7, 6, dtype=F64, generator=gen)
        out = q.quantize(z, tau=0.7, generator=gen)
        logits = q.logits(z).detach()
        assert torch.allclose(out.probs1, torch.softmax(logits[0], dim=-1), atol=1e-12)
        assert torch.allclose(out.probs2, torch.softmax(logits[1], dim=-1), atol=1e-12)
        assert torch.allclose(out.probs1.sum(dim=1), torch.ones(7, dtype=F64), atol=1e-9)

    def test_uniform_selection_with_zero_logits(self):
        cfg = QuantizerConfig(input_dim=2, num_entries=4, entry_dim=2)
        q = GumbelQuantizer(cfg, F64, new_generator(0))
        with torch.no_grad():
            q.classifier_weight.zero_()
            q.classifier_bias.zero_()
            q.entries.fill_(1.0)
        g = new_generator(2)
        counts = torch.zeros(4)
        n = 10_000
        z = torch.zeros(1, 2, dtype=F64)
        for _ in range(n):
            logits = q.logits(z)
            from w2v2lab.numerics import gumbel_softmax

            hard, _ = gumbel_softmax(logits[0], 1.0, g)
            counts += hard[0]
        assert (counts / n - 0.25).abs().max() < 0.02

    def test_classifier_gradient_matches_soft_path_finite_differences(self, gen):
        q = make_quantizer()
        z = torch.randn(3, 6, dtype=F64, generator=gen)
        target = torch.randn(3, 6, dtype=F64, generator=gen)

        def loss():
            # fixed noise stream per evaluation keeps the function smooth
            out = q.quantize(z, tau=1.0, generator=new_generator(77), hard=False)
            return (out.quantized * target).sum()

        q.zero_grad()
        loss().backward()
        analytic = q.classifier_weight.grad.clone()

        def f_params(params):
            with torch.no_grad():
                q.classifier_weight.copy_(params[0])
            return float(loss().detach())

        original = q.classifier_weight.detach().clone()
        fd = finite_diff_grad(f_params, [original.clone()])[0]
        with torch.no_grad():
            q.classifier_weight.copy_(original)
        assert relative_error(analytic, fd) < 1e-5

    def test_straight_through_and_soft_share_gradients(self, gen):
        q = make_quantizer()
        z = torch.randn(4, 6, dtype=F64, generator=gen)
        target = torch.randn(4, 6, dtype=F64, generator=gen)
        q.zero_grad()
        out_hard = q.quantize(z, tau=1.0, generator=new_generator(5), hard=True)
        (out_hard.quantized * target).sum().backward()
        grad_hard = q.classifier_weight.grad.clone()
        q.zero_grad()
        out_soft = q.quantize(z, tau=1.0, generator=new_generator(5), hard=False)
        (out_soft.quantized * target).sum().backward()
        grad_soft = q.classifier_weight.grad.clone()
        assert torch.allclose(grad_hard, grad_soft, atol=1e-12)


class TestTempSchedule:
    def test_starts_at_two(self):
        sched = TempSchedule(total_steps=1000)
        assert sched.temperature_at(0) == 2.0

    def test_floor_reached_and_held(self):
        sched = TempSchedule(total_steps=1000, floor_at=0.75)
        assert sched.temperature_at(750) == pytest.approx(0.5, rel=1e-9)
        assert sched.temperature_at(10_000_000) == 0.5

    def test_monotone_non_increasing(self):
        sched = TempSchedule(total_steps=500)
        taus = [sched.temperature_at(s) for s in range(0, 1200, 7)]
        assert all(a >= b for a, b in zip(taus, taus[1:]))

    def test_rejects_negative_step(self):
        with pytest.raises(ValueError):
            TempSchedule(total_steps=10).temperature_at(-1)


class TestSimilarityStats:
    def test_identical_entries(self):
        entries = torch.ones(3, 4, dtype=F64)
        assert codebook_similarity_stats(entries) == (1.0, 1.0, 1.0)

    def test_orthogonal_entries(self):
        entries = torch.eye(2, dtype=F64)
        avg, lo, hi = codebook_similarity_stats(entries)
        assert (avg, lo, hi) == (0.0, 0.0, 0.0)

    def test_matches_brute_force_over_pairs(self, gen):
        entries = torch.randn(5, 2, dtype=F64, generator=gen)
        avg, lo, hi = codebook_similarity_stats(entries)
        sims = []
        for i in range(5):
            for j in range(i + 1, 5):
                a, b = entries[i], entries[j]
                sims.append(float((a @ b) / (a.norm() * b.norm())))
        assert avg == pytest.approx(sum(sims) / len(sims), abs=1e-12)
        assert lo == pytest.approx(min(sims), abs=1e-12)
        assert hi == pytest.approx(max(sims), abs=1e-12)
        assert -1.0 <= lo <= avg <= hi <= 1.0

    def test_zero_norm_rejected(self):
        entries = torch.zeros(2, 3, dtype=F64)
        with pytest.raises(ValueError):
            codebook_similarity_stats(entries)

    def test_single_entry_rejected(self):
        with pytest.raises(ValueError):
            codebook_similarity_stats(torch.ones(1, 3, dtype=F64))


class TestPerplexityBounds:
    def test_perplexity_of_probs_rows_within_bounds(self, gen):
        q = make_quantizer()
        z = torch.randn(20, 6, dtype=F64, generator=gen)
        out = q.quantize(z, tau=1.0, generator=gen)
        for row in out.probs1.detach():
            entropy = -(row * row.clamp_min(1e-300).log()).sum()
            perplexity = float(torch.exp(entropy))
            assert 1.0 - 1e-9 <= perplexity <= 4.0 + 1e-9

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from w2v2lab.numerics import (
    dropout,
    finite_diff_grad,
    gelu_tanh,
    grad_scale,
    group_norm,
    gumbel_softmax,
    layer_norm,
    new_generator,
    relative_error,
    straight_through,
    weight_norm_kernel,
)

F64 = torch.float64


class TestGeluTanh:
    def test_zero_fixed_point(self):
        assert float(gelu_tanh(torch.tensor(0.0, dtype=F64))) == 0.0

    def test_large_input_asymptote(self):
        assert float(gelu_tanh(torch.tensor(10.0, dtype=F64))) == pytest.approx(10.0, abs=1e-4)

    def test_closed_form_at_one(self):
        # 0.5 * 1 * (1 + tanh(sqrt(2/pi) * (1 + 0.044715))), evaluated in
        # extended precision with the math module.
        expected = 0.5 * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * 1.044715))
        assert float(gelu_tanh(torch.tensor(1.0, dtype=F64))) == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self, gen):
        x = torch.randn(7, dtype=F64, generator=gen, requires_grad=True)
        gelu_tanh(x).sum().backward()
        fd = finite_diff_grad(lambda ps: gelu_tanh(ps[0]).sum(), [x.detach().clone()])
        assert relative_error(x.grad, fd[0]) < 1e-5


class TestLayerNorm:
    def test_constant_vector_maps_to_bias(self):
        x = torch.full((6,), 3.7, dtype=F64)
        out = layer_norm(x, torch.ones(6, dtype=F64), torch.zeros(6, dtype=F64))
        assert out.abs().max() < 1e-6

    def test_two_point_vector(self):
        x = torch.tensor([1.0, -1.0], dtype=F64)
        out = layer_norm(x, torch.ones(2, dtype=F64), torch.zeros(2, dtype=F64))
        # mean 0, population std 1: normalization is identity up to epsilon
        assert torch.allclose(out, x, atol=1e-5)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_output_mean_equals_bias(self, values):
        x = torch.tensor(values, dtype=F64)
        bias = torch.full((len(values),), 0.25, dtype=F64)
        out = layer_norm(x, torch.ones(len(values), dtype=F64), bias)
        assert float(out.mean()) == pytest.approx(0.25, abs=1e-7)

    def test_variance_matches_gain(self, gen):
        x = torch.randn(64, dtype=F64, generator=gen) * 5
        gain = torch.full((64,), 2.0, dtype=F64)
        out = layer_norm(x, gain, torch.zeros(64, dtype=F64))
        assert float(out.var(unbiased=False)) == pytest.approx(4.0, abs=1e-4)


class TestGroupNorm:
    def test_constant_channel_zeros(self):
        x = torch.full((1, 4), 2.0, dtype=F64)
        out = group_norm(x, 1, torch.ones(1, dtype=F64), torch.zeros(1, dtype=F64))
        assert out.abs().max() < 1e-6

    def test_hand_normalized_two_channels(self):
        x = torch.tensor([[1.0, 3.0], [0.0, 0.0]], dtype=F64)
        out = group_norm(x, 2, torch.ones(2, dtype=F64), torch.zeros(2, dtype=F64))
        expected = torch.tensor([[-1.0, 1.0], [0.0, 0.0]], dtype=F64)
        assert torch.allclose(out, expected, atol=1e-4)

    def test_groups_equals_channels_is_per_channel_layer_norm(self, gen):
        x = torch.randn(3, 10, dtype=F64, generator=gen)
        gain = torch.ones(3, dtype=F64)
        bias = torch.zeros(3, dtype=F64)
        grouped = group_norm(x, 3, gain, bias)
        per_channel = torch.stack(
            [layer_norm(x[c], torch.ones(10, dtype=F64), torch.zeros(10, dtype=F64)) for c in range(3)]
        )
        assert torch.allclose(grouped, per_channel, atol=1e-10)

    def test_indivisible_groups_rejected(self):
        with pytest.raises(ValueError):
            group_norm(torch.zeros(3, 4, dtype=F64), 2, torch.ones(3, dtype=F64), torch.zeros(3, dtype=F64))


class TestGumbelSoftmax:
    def test_hard_is_one_hot_and_soft_is_distribution(self, gen):
        logits = torch.randn(11, dtype=F64, generator=gen)
        hard, soft = gumbel_softmax(logits, 0.7, gen)
        assert float(hard.sum()) == 1.0
        assert (hard == 1.0).sum() == 1
        assert float(soft.sum()) == pytest.approx(1.0, abs=1e-9)
        assert bool((soft >= 0).all()) and bool((soft <= 1).all())

    def test_dominant_logit_always_selected(self):
        g = new_generator(7)
        logits = torch.tensor([100.0, 0.0, 0.0], dtype=F64)
        hits = 0
        for _ in range(10_000):
            hard, _ = gumbel_softmax(logits, 0.5, g)
            hits += int(hard[0])
        assert hits == 10_000

    def test_high_temperature_soft_near_uniform(self):
        g = new_generator(8)
        logits = torch.zeros(5, dtype=F64)
        total = torch.zeros(5, dtype=F64)
        n = 10_000
        for _ in range(n):
            _, soft = gumbel_softmax(logits, 100.0, g)
            total += soft
        assert (total / n - 0.2).abs().max() < 1e-2

    def test_rejects_non_positive_temperature(self, gen):
        with pytest.raises(ValueError):
            gumbel_softmax(torch.zeros(3, dtype=F64), 0.0, gen)

    def test_straight_through_forward_hard_backward_soft(self, gen):
        logits = torch.randn(4, dtype=F64, generator=gen, requires_grad=True)
        hard, soft = gumbel_softmax(logits, 1.0, gen)
        st_val = straight_through(hard, soft)
        assert torch.equal(st_val.detach(), hard)
        weights = torch.arange(4, dtype=F64)
        (st_val * weights).sum().backward()
        # gradient equals the soft path's gradient exactly
        assert logits.grad is not None and float(logits.grad.abs().sum()) > 0


class TestWeightNorm:
    def test_unit_direction_identity(self):
        v = torch.zeros(1, 4, dtype=F64)
        v[0, 2] = 1.0
        out = weight_norm_kernel(v, torch.ones(1, dtype=F64))
        assert torch.equal(out, v)

    def test_scale_invariance_of_direction(self, gen):
        v = torch.randn(3, 5, dtype=F64, generator=gen)
        g = torch.tensor([1.5, -0.5, 2.0], dtype=F64)
        assert torch.allclose(weight_norm_kernel(v, g), weight_norm_kernel(7.0 * v, g), atol=1e-12)

    def test_zero_magnitude_zero_kernel(self, gen):
        v = torch.randn(2, 3, dtype=F64, generator=gen)
        out = weight_norm_kernel(v, torch.zeros(2, dtype=F64))
        assert float(out.abs().max()) == 0.0

    def test_zero_direction_rejected(self):
        v = torch.zeros(2, 3, dtype=F64)
        with pytest.raises(ValueError):
            weight_norm_kernel(v, torch.ones(2, dtype=F64))


class TestGradScale:
    def test_forward_identity(self, gen):
        x = torch.randn(5, dtype=F64, generator=gen)
        assert torch.equal(grad_scale(x, 0.1), x)

    def test_backward_scales_gradient(self):
        x = torch.ones(3, dtype=F64, requires_grad=True)
        grad_scale(x, 0.1).sum().backward()
        assert torch.allclose(x.grad, torch.full((3,), 0.1, dtype=F64), atol=1e-15)

    def test_scale_one_is_identity_backward(self):
        x = torch.ones(3, dtype=F64, requires_grad=True)
        grad_scale(x, 1.0).sum().backward()
        assert torch.equal(x.grad, torch.ones(3, dtype=F64))


class TestFiniteDiff:
    def test_square_at_three(self):
        fd = finite_diff_grad(lambda ps: float(ps[0] ** 2), [torch.tensor([3.0], dtype=F64)], epsilon=1e-5)
        assert float(fd[0]) == pytest.approx(6.0, abs=1e-6)

    def test_sum_of_squares(self):
        p = torch.tensor([1.0, 2.0, 3.0], dtype=F64)
        fd = finite_diff_grad(lambda ps: float((ps[0] ** 2).sum()), [p])
        assert torch.allclose(fd[0], torch.tensor([2.0, 4.0, 6.0], dtype=F64), atol=1e-6)

    def test_rejects_bad_epsilon(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda ps: 0.0, [torch.zeros(1, dtype=F64)], epsilon=0.0)

    def test_rejects_non_finite_values(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda ps: float("nan"), [torch.zeros(1, dtype=F64)])


class TestDropout:
    def test_eval_mode_identity(self, gen):
        x = torch.randn(10, dtype=F64, generator=gen)
        assert torch.equal(dropout(x, 0.5, gen, training=False), x)

    def test_training_scales_survivors(self):
        g = new_generator(3)
        x = torch.ones(10_000, dtype=F64)
        out = dropout(x, 0.25, g, training=True)
        kept = out != 0
        assert float(out[kept][0]) == pytest.approx(1.0 / 0.75)
        assert float(kept.to(F64).mean()) == pytest.approx(0.75, abs=0.02)

    def test_same_stream_same_mask(self):
        x = torch.ones(100, dtype=F64)
        a = dropout(x, 0.5, new_generator(5), training=True)
        b = dropout(x, 0.5, new_generator(5), training=True)
        assert torch.equal(a, b)

"""Elementary differentiable operations shared by every network component.

All functions operate on plain ``torch.Tensor`` values and take explicit
``torch.Generator`` streams wherever randomness is involved, so the whole
stack stays reproducible and thread-safe (one generator per owner).
Test and oracle code runs in float64; float32 is allowed for training.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch

NORM_EPS = 1e-5
GUMBEL_CLAMP = 1e-12


def new_generator(seed: int) -> torch.Generator:
    """CPU random stream seeded with a 64-bit integer."""
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def split_generator(g: torch.Generator) -> torch.Generator:
    """Derive an independent child stream from ``g``."""
    child_seed = int(torch.randint(0, 2**62, (1,), generator=g).item())
    return new_generator(child_seed)


def gelu_tanh(x: torch.Tensor) -> torch.Tensor:
    """GELU activation with the tanh approximation.

    y = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
    """
    return torch.nn.functional.gelu(x, approximate="tanh")


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor,
    bias: torch.Tensor,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Normalize the last dimension to zero mean / unit variance, then apply affine.

    Variance is the biased (1/N) estimate; ``eps`` is added to the variance
    before the square root, so constant inputs map to ``bias``.
    """
    return torch.nn.functional.layer_norm(x, x.shape[-1:], gain, bias, eps)


def group_norm(
    x: torch.Tensor,
    groups: int,
    gain: torch.Tensor,
    bias: torch.Tensor,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """GroupNorm over a (..., channels, time) tensor.

    Channels are split into ``groups`` contiguous groups; each group is
    normalized over its (channels/groups, time) block to zero mean / unit
    (biased) variance. With ``groups == channels`` every channel is
    normalized independently along time. ``gain`` and ``bias`` are
    per-channel.
    """
    *lead, channels, time = x.shape
    if channels % groups != 0:
        raise ValueError(f"channels ({channels}) not divisible by groups ({groups})")
    batched = x.reshape(-1, channels, time) if lead else x.unsqueeze(0)
    out = torch.nn.functional.group_norm(batched, groups, gain, bias, eps)
    return out.reshape(x.shape)


def sample_gumbel(
    shape: Sequence[int],
    generator: torch.Generator,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """Gumbel(0, 1) noise via -log(-log(u)), u clamped away from {0, 1}."""
    u = torch.rand(tuple(shape), generator=generator, dtype=dtype)
    u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -torch.log(-torch.log(u))


def gumbel_softmax(
    logits: torch.Tensor,
    tau: float,
    generator: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample from a categorical relaxation of ``logits``.

    Returns ``(hard, soft)`` over the last dimension: ``hard`` is the exact
    one-hot at the argmax of the noise-perturbed, temperature-scaled logits
    and carries no gradient; ``soft`` is the softmax of the same perturbed
    logits and carries the gradient. Combine with
    :func:`straight_through` for forward-hard / backward-soft selection.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    noise = sample_gumbel(logits.shape, generator, dtype=logits.dtype)
    perturbed = (logits + noise) / tau
    soft = torch.softmax(perturbed, dim=-1)
    index = perturbed.argmax(dim=-1, keepdim=True)
    hard = torch.zeros_like(logits).scatter_(-1, index, 1.0)
    return hard.detach(), soft


def straight_through(hard: torch.Tensor, soft: torch.Tensor) -> torch.Tensor:
    """Forward value of ``hard`` exactly, gradient of ``soft``.

    The (soft - soft.detach()) term is an exact elementwise zero, so the
    grouping must not be rewritten as (hard + soft) - soft.
    """
    return hard + (soft - soft.detach())


def weight_norm_kernel(direction: torch.Tensor, magnitude: torch.Tensor) -> torch.Tensor:
    """Effective kernel g * v / ||v|| with one magnitude per output channel.

    ``direction`` has shape (out_channels, ...); the norm is taken over all
    trailing dimensions of each output channel's slice.
    """
    flat = direction.reshape(direction.shape[0], -1)
    norms = flat.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("weight norm direction has a zero-norm output channel")
    shape = (direction.shape[0],) + (1,) * (direction.dim() - 1)
    return direction / norms.view(shape) * magnitude.view(shape)


class GradScaleFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, scale: float) -> torch.Tensor:
        ctx.scale = scale
        return x

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        return grad_out * ctx.scale, None


def grad_scale(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Identity in the forward pass; multiplies the gradient by ``scale``."""
    return GradScaleFn.apply(x, scale)


def dropout(
    x: torch.Tensor,
    p: float,
    generator: torch.Generator | None,
    training: bool,
) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator (torch's builtin
    dropout cannot take one, which would break run-to-run determinism)."""
    if not training or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def finite_diff_grad(
    f: Callable[[Sequence[torch.Tensor]], float | torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-6,
) -> list[torch.Tensor]:
    """Central-difference gradient estimate of a scalar function.

    ``f`` is re-evaluated at component-wise perturbations of ``params``
    (which are modified in place and restored). This is the independent
    oracle every reverse-mode gradient in the repository is checked against,
    so it must never call ``backward`` itself.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.reshape(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = float(f(params))
                flat[i] = orig - epsilon
                f_minus = float(f(params))
                flat[i] = orig
                if not (torch.isfinite(torch.tensor(f_plus)) and torch.isfinite(torch.tensor(f_minus))):
                    raise ValueError("non-finite function value during finite differencing")
                g[i] = (f_plus - f_minus) / (2.0 * epsilon)
            grads.append(g.reshape(p.shape))
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||a||, ||b||, tiny); used for gradient certification."""
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-300)
    return num / den

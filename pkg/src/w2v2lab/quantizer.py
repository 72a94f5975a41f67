"""Product quantization of latents via two gumbel-softmax codebooks.

Each latent z_t is classified independently by two linear classifiers
(one per codebook). Selection is hard in the forward pass (an exact
codebook row) while gradients flow through the softmax relaxation. The
probabilities consumed by the diversity loss are vanilla (noise-free,
temperature-free) softmax rows of the same logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .numerics import gumbel_softmax, straight_through


@dataclass
class QuantizerConfig:
    input_dim: int = 512
    num_entries: int = 320  # V, per codebook
    entry_dim: int = 128  # d_G; quantized dim is 2 * entry_dim
    classifier_init_std: float = 1.0
    # Wide enough to concentrate the initial classification (so codebook
    # usage has room to grow), small enough that unused entries keep a
    # recoverable gradient.
    classifier_bias_init_std: float = 2.0

    @property
    def quantized_dim(self) -> int:
        return 2 * self.entry_dim


@dataclass
class TempSchedule:
    """Multiplicative temperature decay with a floor.

    tau(0) = tau_start; tau decays by a constant factor per step and
    reaches tau_floor at ``floor_at`` of ``total_steps``, staying there.
    """

    tau_start: float = 2.0
    tau_floor: float = 0.5
    total_steps: int = 400_000
    floor_at: float = 0.75

    def temperature_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be non-negative")
        floor_step = max(1.0, self.floor_at * self.total_steps)
        gamma = (self.tau_floor / self.tau_start) ** (1.0 / floor_step)
        return max(self.tau_floor, self.tau_start * gamma**step)


@dataclass
class QuantizedSequence:
    """Per-utterance quantization result.

    quantized: (T, 2 * entry_dim), exact concatenation of one row from each
        codebook in the forward pass (straight-through gradients).
    probs1, probs2: (T, V) vanilla-softmax rows used by the diversity loss.
    """

    quantized: torch.Tensor
    probs1: torch.Tensor
    probs2: torch.Tensor


class GumbelQuantizer(nn.Module):
    def __init__(self, config: QuantizerConfig, dtype: torch.dtype, generator: torch.Generator):
        super().__init__()
        self.config = config
        v, d_g = config.num_entries, config.entry_dim
        entries = torch.empty(2, v, d_g, dtype=dtype)
        bound = d_g**-0.5
        with torch.no_grad():
            entries.uniform_(-bound, bound, generator=generator)
        self.entries = nn.Parameter(entries)
        # The biases start wide relative to the data-dependent logits, so
        # the initial classification concentrates on a few entries; the
        # diversity loss then drives codebook usage (and its perplexity)
        # upward from step 0 instead of starting saturated at V.
        weight = torch.empty(2, v, config.input_dim, dtype=dtype)
        bias = torch.empty(2, v, dtype=dtype)
        with torch.no_grad():
            weight.normal_(0.0, config.classifier_init_std, generator=generator)
            bias.normal_(0.0, config.classifier_bias_init_std, generator=generator)
        self.classifier_weight = nn.Parameter(weight)
        self.classifier_bias = nn.Parameter(bias)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        """Classifier logits of shape (2, T, V) for latents z of shape (T, d_z)."""
        return torch.einsum("td,gvd->gtv", z, self.classifier_weight) + self.classifier_bias.unsqueeze(1)

    def quantize(
        self,
        z: torch.Tensor,
        tau: float,
        generator: torch.Generator,
        hard: bool = True,
    ) -> QuantizedSequence:
        """Quantize a (T, d_z) latent sequence.

        With ``hard=False`` the selection uses the soft relaxation directly
        (differentiable everywhere); used by the finite-difference harness,
        which certifies the gradient path the straight-through estimator
        shares.
        """
        logits = self.logits(z)
        onehot, soft = gumbel_softmax(logits, tau, generator)
        selection = straight_through(onehot, soft) if hard else soft
        picked = torch.einsum("gtv,gvd->gtd", selection, self.entries)
        quantized = torch.cat([picked[0], picked[1]], dim=-1)
        plain = torch.softmax(logits, dim=-1)
        return QuantizedSequence(quantized=quantized, probs1=plain[0], probs2=plain[1])


def codebook_similarity_stats(entries: torch.Tensor) -> tuple[float, float, float]:
    """(avg, min, max) cosine similarity over all unordered codeword pairs.

    ``entries`` is one codebook of shape (V, d_G); V >= 2 and no zero rows.
    """
    if entries.dim() != 2 or entries.shape[0] < 2:
        raise ValueError("need a (V, d_G) codebook with V >= 2")
    entries = entries.detach()
    norms = entries.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("codebook contains a zero-norm codeword")
    unit = entries / norms.unsqueeze(1)
    sim = unit @ unit.T
    v = entries.shape[0]
    iu = torch.triu_indices(v, v, offset=1)
    pairs = sim[iu[0], iu[1]]
    return float(pairs.mean()), float(pairs.min()), float(pairs.max())

"""The three-term self-supervised objective and its monitoring metrics.

Total loss: L = contrastive + 0.1 * diversity + 10 * l2_penalty.

The contrastive term is a (1 + k)-way classification per masked step with
cosine-similarity logits at temperature 0.1; negatives are quantized
vectors from other masked steps of the same utterance. The diversity term
is codebook size minus the perplexity of batch-averaged selection
probabilities, summed over both codebooks. The penalty term is the mean
squared component of the unpadded latents, summed over utterances.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DIVERSITY_WEIGHT = 0.1
PENALTY_WEIGHT = 10.0
CONTRASTIVE_TEMPERATURE = 0.1


@dataclass
class LossBreakdown:
    contrastive: float
    diversity: float
    penalty: float
    total: float
    masked_steps: int
    accuracy: float
    perplexity_g1: float
    perplexity_g2: float


def sample_distractors(
    mask_indices: torch.Tensor, k: int, generator: torch.Generator
) -> torch.Tensor:
    """For each masked step, k time steps drawn uniformly from the other
    masked steps.

    Returns a (|M|, k) tensor of time indices; row i never contains
    ``mask_indices[i]``. Sampling is without replacement when
    |M| - 1 >= k, otherwise with replacement (duplicates then simply
    appear multiple times in the softmax denominator).
    """
    m = int(mask_indices.numel())
    if m < 2:
        raise ValueError("need at least 2 masked steps to sample distractors")
    if k < 1:
        return torch.zeros((m, 0), dtype=torch.long)
    if m - 1 >= k:
        scores = torch.rand((m, m), generator=generator, dtype=torch.float64)
        scores.fill_diagonal_(torch.inf)
        picks = scores.argsort(dim=1)[:, :k]
    else:
        picks = torch.randint(0, m - 1, (m, k), generator=generator)
        row = torch.arange(m).unsqueeze(1)
        picks = picks + (picks >= row).long()  # skip self, keep uniform
    return mask_indices[picks]


def contrastive_loss(
    c_proj: torch.Tensor,
    q_proj: torch.Tensor,
    mask_indices: torch.Tensor,
    distractors: torch.Tensor,
    temperature: float = CONTRASTIVE_TEMPERATURE,
) -> tuple[torch.Tensor, float]:
    """Summed InfoNCE loss over masked steps and strict-argmax accuracy.

    c_proj, q_proj: (T, d_sim) projected context/quantized vectors.
    mask_indices: (|M|,) masked time steps; distractors: (|M|, k) time
    steps of the negatives for each masked step. A tie between the target
    and any distractor counts as an incorrect prediction.
    """
    if mask_indices.numel() == 0:
        raise ValueError("mask is empty; nothing to contrast")
    c = c_proj[mask_indices]  # (M, d)
    q_all = torch.cat([mask_indices.unsqueeze(1), distractors], dim=1)  # (M, 1+k)
    q = q_proj[q_all]  # (M, 1+k, d)
    c_norm = c.norm(dim=-1)
    q_norm = q.norm(dim=-1)
    if bool((c_norm == 0).any()) or bool((q_norm == 0).any()):
        raise ValueError("zero-norm vector in cosine similarity")
    sims = torch.einsum("md,mkd->mk", c, q) / (c_norm.unsqueeze(1) * q_norm)
    logits = sims / temperature
    loss = (torch.logsumexp(logits, dim=1) - logits[:, 0]).sum()
    with torch.no_grad():
        k = distractors.shape[1]
        if k == 0:
            correct = torch.zeros(mask_indices.numel(), dtype=torch.bool)
        else:
            correct = sims[:, 0] > sims[:, 1:].max(dim=1).values
        accuracy = float(correct.to(torch.float64).mean())
    return loss, accuracy


def diversity_loss(probs_per_codebook: list[torch.Tensor]) -> tuple[torch.Tensor, list[float]]:
    """Codebook size minus perplexity of the averaged distribution, summed.

    Each element of ``probs_per_codebook`` is an (N, V) stack of softmax
    rows pooled over every valid step of every utterance in the gpu-batch.
    Returns the loss and the per-codebook perplexities.
    """
    total = None
    perplexities = []
    for probs in probs_per_codebook:
        v = probs.shape[-1]
        avg = probs.reshape(-1, v).mean(dim=0)
        entropy = -(avg * torch.log(avg.clamp_min(1e-300))).sum()
        perplexity = torch.exp(entropy)
        term = v - perplexity
        total = term if total is None else total + term
        perplexities.append(float(perplexity.detach()))
    return total, perplexities


def l2_penalty(z: torch.Tensor) -> torch.Tensor:
    """Mean squared component of one utterance's unpadded latents (T, d_z)."""
    return z.pow(2).mean()


def combine(contrastive: torch.Tensor, diversity: torch.Tensor, penalty: torch.Tensor) -> torch.Tensor:
    return contrastive + DIVERSITY_WEIGHT * diversity + PENALTY_WEIGHT * penalty

"""Full models: the pretraining network and the CTC recognition network.

Both share the convolutional feature encoder and the transformer context
network. The pretraining model adds the gumbel quantizer and the two
similarity projections; the recognition model adds a linear character
head instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import RunConfig
from .context_network import ContextNetwork, TransformerConfig, sample_mask
from .dataset import NUM_CLASSES
from .feature_encoder import EncoderConfig, FeatureEncoder
from .quantizer import GumbelQuantizer, QuantizerConfig
from .ssl_objective import (
    LossBreakdown,
    combine,
    contrastive_loss,
    diversity_loss,
    l2_penalty,
    sample_distractors,
)


def _transformer_config(cfg: RunConfig) -> TransformerConfig:
    return TransformerConfig(
        layers=cfg.layers,
        model_dim=cfg.model_dim,
        heads=cfg.heads,
        ffn_dim=cfg.ffn_dim,
        dropout=cfg.dropout,
        pos_conv_kernel=cfg.pos_conv_kernel,
        pos_conv_groups=cfg.pos_conv_groups,
    )


class SslModel(nn.Module):
    def __init__(self, cfg: RunConfig, generator: torch.Generator):
        super().__init__()
        dtype = cfg.torch_dtype()
        self.cfg = cfg
        self.encoder = FeatureEncoder(
            EncoderConfig(channels=cfg.encoder_channels, grad_scale=cfg.grad_scale),
            dtype, generator,
        )
        self.quantizer = GumbelQuantizer(
            QuantizerConfig(
                input_dim=cfg.encoder_channels,
                num_entries=cfg.codebook_entries,
                entry_dim=cfg.codebook_dim,
                classifier_bias_init_std=cfg.quantizer_bias_init,
            ),
            dtype, generator,
        )
        self.context = ContextNetwork(cfg.encoder_channels, _transformer_config(cfg), dtype, generator)
        self.project_context = nn.Linear(cfg.model_dim, cfg.sim_dim, dtype=dtype)
        self.project_quantized = nn.Linear(2 * cfg.codebook_dim, cfg.sim_dim, dtype=dtype)
        for lin in (self.project_context, self.project_quantized):
            with torch.no_grad():
                lin.weight.normal_(0.0, 0.02, generator=generator).clamp_(-0.04, 0.04)
                lin.bias.zero_()


@dataclass
class SslStepResult:
    loss: torch.Tensor
    breakdown: LossBreakdown
    skipped_utterances: int
    # Detached selection-probability sums (2, V) and the step count behind
    # them, so a validation pass can pool a corpus-level distribution.
    prob_sums: torch.Tensor | None = None
    prob_count: int = 0


def ssl_step(
    model: SslModel,
    waveforms: torch.Tensor,
    frame_lens: torch.Tensor,
    tau: float,
    generator: torch.Generator,
    training: bool,
    hard: bool = True,
) -> SslStepResult:
    """One gpu-batch through the pretraining objective.

    waveforms: (B, S) zero-padded; frame_lens: (B,) valid latent counts.
    Per-utterance terms (contrastive, penalty) are computed on unpadded
    slices and summed; the diversity term pools selection probabilities
    over the whole gpu-batch. Utterances whose mask has fewer than two
    steps are skipped by the contrastive term.
    """
    cfg = model.cfg
    b = waveforms.shape[0]
    z_all = model.encoder(waveforms)  # (B, T_pad, d_z)

    penalty = None
    quantized = []
    probs1, probs2 = [], []
    masks = []
    for i in range(b):
        t_i = int(frame_lens[i])
        z = z_all[i, :t_i]
        term = l2_penalty(z)
        penalty = term if penalty is None else penalty + term
        qseq = model.quantizer.quantize(z, tau, generator, hard=hard)
        quantized.append(qseq.quantized)
        probs1.append(qseq.probs1)
        probs2.append(qseq.probs2)
        masks.append(sample_mask(t_i, cfg.mask_prob, cfg.mask_span, generator))

    projected = model.context.project(z_all)
    x = projected.clone()
    for i in range(b):
        if len(masks[i]):
            x[i, masks[i].indices] = model.context.mask_vector.to(x.dtype)
    c_all = model.context.contextualize(x, frame_lens, generator, training)

    contrast = None
    total_correct = 0.0
    total_masked = 0
    skipped = 0
    for i in range(b):
        spec = masks[i]
        if spec.skip or len(spec) < 2:
            skipped += 1
            continue
        t_i = int(frame_lens[i])
        c_proj = model.project_context(c_all[i, :t_i])
        q_proj = model.project_quantized(quantized[i])
        picks = sample_distractors(spec.indices, cfg.distractors, generator)
        loss_i, acc_i = contrastive_loss(c_proj, q_proj, spec.indices, picks)
        contrast = loss_i if contrast is None else contrast + loss_i
        total_correct += acc_i * len(spec)
        total_masked += len(spec)

    if contrast is None:
        contrast = torch.zeros((), dtype=z_all.dtype)
    pooled1 = torch.cat(probs1, dim=0)
    pooled2 = torch.cat(probs2, dim=0)
    diversity, perplexities = diversity_loss([pooled1, pooled2])
    total = combine(contrast, diversity, penalty)
    breakdown = LossBreakdown(
        contrastive=float(contrast.detach()),
        diversity=float(diversity.detach()),
        penalty=float(penalty.detach()),
        total=float(total.detach()),
        masked_steps=total_masked,
        accuracy=(total_correct / total_masked) if total_masked else 0.0,
        perplexity_g1=perplexities[0],
        perplexity_g2=perplexities[1],
    )
    return SslStepResult(
        loss=total,
        breakdown=breakdown,
        skipped_utterances=skipped,
        prob_sums=torch.stack([pooled1.sum(dim=0), pooled2.sum(dim=0)]).detach(),
        prob_count=pooled1.shape[0],
    )


class AsrModel(nn.Module):
    """Feature encoder + context network + linear character head."""

    def __init__(self, cfg: RunConfig, generator: torch.Generator):
        super().__init__()
        dtype = cfg.torch_dtype()
        self.cfg = cfg
        self.encoder = FeatureEncoder(
            EncoderConfig(channels=cfg.encoder_channels, grad_scale=cfg.grad_scale),
            dtype, generator,
        )
        ctx_cfg = _transformer_config(cfg)
        ctx_cfg.dropout = cfg.ft_dropout
        self.context = ContextNetwork(cfg.encoder_channels, ctx_cfg, dtype, generator)
        self.head = nn.Linear(cfg.model_dim, NUM_CLASSES, dtype=dtype)
        with torch.no_grad():
            self.head.weight.normal_(0.0, 0.02, generator=generator).clamp_(-0.04, 0.04)
            self.head.bias.zero_()

    def forward(
        self,
        waveforms: torch.Tensor,
        frame_lens: torch.Tensor,
        generator: torch.Generator | None = None,
        training: bool = False,
    ) -> torch.Tensor:
        """Per-frame character logits (B, T_pad, classes).

        During training a small fraction of projected latents is replaced
        by the learned mask vector; at inference no masking happens.
        """
        z = self.encoder(waveforms)
        x = self.context.project(z)
        if training:
            for i in range(waveforms.shape[0]):
                spec = sample_mask(int(frame_lens[i]), self.cfg.ft_mask_prob,
                                   self.cfg.mask_span, generator)
                if len(spec):
                    x[i, spec.indices] = self.context.mask_vector.to(x.dtype)
        c = self.context.contextualize(x, frame_lens, generator, training)
        return self.head(c)

    def load_pretrained(self, ssl_state: dict[str, torch.Tensor]) -> None:
        """Copy encoder + context parameters from a pretraining checkpoint.

        Quantizer and similarity projections are dropped; the character
        head stays at its fresh initialization. Mismatched shapes raise
        with the offending tensor names.
        """
        own = dict(self.named_parameters())
        mismatched = []
        copied = 0
        for name, tensor in ssl_state.items():
            if not (name.startswith("encoder.") or name.startswith("context.")):
                continue
            if name not in own:
                mismatched.append(f"{name} (missing in recognition model)")
                continue
            if own[name].shape != tensor.shape:
                mismatched.append(
                    f"{name} (checkpoint {tuple(tensor.shape)} vs model {tuple(own[name].shape)})"
                )
                continue
            with torch.no_grad():
                own[name].copy_(tensor.to(own[name].dtype))
            copied += 1
        if mismatched:
            raise ValueError("incompatible pretrained tensors: " + "; ".join(mismatched))
        if copied == 0:
            raise ValueError("checkpoint contained no encoder/context tensors")


def build_ssl_model(cfg: RunConfig, seed: int) -> SslModel:
    from .numerics import new_generator

    return SslModel(cfg, new_generator(seed))


def build_asr_model(cfg: RunConfig, seed: int) -> AsrModel:
    from .numerics import new_generator

    return AsrModel(cfg, new_generator(seed))

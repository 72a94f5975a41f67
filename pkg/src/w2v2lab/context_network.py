"""Masking plus the transformer context network over projected latents.

Pipeline per utterance: LayerNorm(z) -> linear projection to the model
dimension -> span masking with a learned mask vector -> grouped
convolutional relative positional embedding (weight-normalized kernel,
GELU, added elementwise) -> post-LN transformer stack. Padded frames are
excluded from attention by forcing their key scores to -inf, and are
zeroed around the positional convolution so appended padding never leaks
into valid positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .numerics import dropout, gelu_tanh, layer_norm, weight_norm_kernel


@dataclass
class MaskSpec:
    """Masked time indices for one utterance (empty + skip when T is too short)."""

    indices: torch.Tensor  # 1-d long tensor, sorted, within [0, valid_len)
    num_spans: int
    skip: bool

    def __len__(self) -> int:
        return int(self.indices.numel())


def sample_mask(
    valid_len: int,
    mask_prob: float,
    span_len: int,
    generator: torch.Generator,
) -> MaskSpec:
    """Draw span starts and build the masked index set.

    The number of spans is floor(valid_len * mask_prob / span_len); starts
    are distinct indices drawn uniformly from [0, valid_len); each span
    covers ``span_len`` consecutive frames, clipped at the sequence end.
    Spans may overlap, so coverage is at most ``num_spans * span_len``.
    When no span fits, the mask is empty and flagged to be skipped by the
    contrastive loss.
    """
    if valid_len < 1:
        raise ValueError("valid_len must be >= 1")
    n_spans = int(valid_len * mask_prob / span_len)
    if n_spans == 0:
        return MaskSpec(indices=torch.zeros(0, dtype=torch.long), num_spans=0, skip=True)
    starts = torch.randperm(valid_len, generator=generator)[:n_spans]
    covered = torch.zeros(valid_len, dtype=torch.bool)
    for s in starts.tolist():
        covered[s : s + span_len] = True
    return MaskSpec(indices=torch.nonzero(covered).squeeze(1), num_spans=n_spans, skip=False)


def apply_mask(x: torch.Tensor, spec: MaskSpec, mask_vector: torch.Tensor) -> torch.Tensor:
    """Replace masked rows of a (T, d) sequence with the learned vector."""
    if len(spec) == 0:
        return x
    if int(spec.indices.max()) >= x.shape[0]:
        raise ValueError("mask index beyond sequence length")
    out = x.clone()
    out[spec.indices] = mask_vector.to(x.dtype)
    return out


@dataclass
class TransformerConfig:
    layers: int = 12
    model_dim: int = 768
    heads: int = 12
    ffn_dim: int = 2048
    dropout: float = 0.1
    pos_conv_kernel: int = 128  # even, with padding kernel/2 -> one extra frame, trimmed
    pos_conv_groups: int = 16

    def __post_init__(self) -> None:
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")
        if self.pos_conv_kernel % 2 != 0:
            raise ValueError("pos_conv_kernel must be even so the trim rule holds")
        if self.model_dim % self.pos_conv_groups != 0:
            raise ValueError("model_dim must be divisible by pos_conv_groups")


def _init_linear(linear: nn.Linear, generator: torch.Generator, std: float = 0.02) -> None:
    with torch.no_grad():
        linear.weight.normal_(0.0, std, generator=generator).clamp_(-2 * std, 2 * std)
        if linear.bias is not None:
            linear.bias.zero_()


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dtype: torch.dtype, generator: torch.Generator):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim, dtype=dtype)
        self.k = nn.Linear(dim, dim, dtype=dtype)
        self.v = nn.Linear(dim, dim, dtype=dtype)
        self.out = nn.Linear(dim, dim, dtype=dtype)
        for lin in (self.q, self.k, self.v, self.out):
            _init_linear(lin, generator)

    def forward(
        self,
        x: torch.Tensor,
        pad: torch.Tensor,
        drop: float,
        generator: torch.Generator | None,
        training: bool,
    ) -> torch.Tensor:
        b, t, d = x.shape
        def split(proj):
            return proj(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q), split(self.k), split(self.v)
        scores = q @ k.transpose(-1, -2) / self.head_dim**0.5
        scores = scores.masked_fill(pad.view(b, 1, 1, t), float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        probs = dropout(probs, drop, generator, training)
        ctx = (probs @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(ctx)


class TransformerLayer(nn.Module):
    """Post-LN block: LayerNorm after each residual addition."""

    def __init__(self, cfg: TransformerConfig, dtype: torch.dtype, generator: torch.Generator):
        super().__init__()
        d = cfg.model_dim
        self.attention = SelfAttention(d, cfg.heads, dtype, generator)
        self.ffn_in = nn.Linear(d, cfg.ffn_dim, dtype=dtype)
        self.ffn_out = nn.Linear(cfg.ffn_dim, d, dtype=dtype)
        _init_linear(self.ffn_in, generator)
        _init_linear(self.ffn_out, generator)
        self.ln1_gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln1_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.ln2_gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln2_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.drop = cfg.dropout

    def forward(self, x, pad, generator, training):
        attn = self.attention(x, pad, self.drop, generator, training)
        x = layer_norm(x + dropout(attn, self.drop, generator, training), self.ln1_gain, self.ln1_bias)
        ffn = self.ffn_out(gelu_tanh(self.ffn_in(x)))
        x = layer_norm(x + dropout(ffn, self.drop, generator, training), self.ln2_gain, self.ln2_bias)
        return x


class RelPosEmbedding(nn.Module):
    """Grouped conv positional embedding with weight-normalized kernel.

    An even kernel k with padding k/2 yields T + 1 frames; the final frame
    is trimmed so the embedding adds elementwise to the input.
    """

    def __init__(self, cfg: TransformerConfig, dtype: torch.dtype, generator: torch.Generator):
        super().__init__()
        d, k, g = cfg.model_dim, cfg.pos_conv_kernel, cfg.pos_conv_groups
        direction = torch.empty(d, d // g, k, dtype=dtype)
        with torch.no_grad():
            direction.normal_(0.0, (4.0 / (k * d)) ** 0.5, generator=generator)
        self.direction = nn.Parameter(direction)
        self.magnitude = nn.Parameter(direction.detach().reshape(d, -1).norm(dim=1).clone())
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.kernel_size = k
        self.groups = g

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weight = weight_norm_kernel(self.direction, self.magnitude)
        emb = F.conv1d(
            x.transpose(1, 2), weight, self.bias,
            padding=self.kernel_size // 2, groups=self.groups,
        )
        emb = emb[:, :, : x.shape[1]]
        return gelu_tanh(emb.transpose(1, 2))


class ContextNetwork(nn.Module):
    """LayerNorm + projection + mask vector + positional conv + transformer."""

    def __init__(
        self,
        input_dim: int,
        cfg: TransformerConfig,
        dtype: torch.dtype,
        generator: torch.Generator,
    ):
        super().__init__()
        self.cfg = cfg
        self.input_ln_gain = nn.Parameter(torch.ones(input_dim, dtype=dtype))
        self.input_ln_bias = nn.Parameter(torch.zeros(input_dim, dtype=dtype))
        self.projection = nn.Linear(input_dim, cfg.model_dim, dtype=dtype)
        _init_linear(self.projection, generator)
        mask_vec = torch.empty(cfg.model_dim, dtype=dtype)
        with torch.no_grad():
            mask_vec.uniform_(0.0, 1.0, generator=generator)
        self.mask_vector = nn.Parameter(mask_vec)
        self.pos_embedding = RelPosEmbedding(cfg, dtype, generator)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg, dtype, generator) for _ in range(cfg.layers)
        )

    def project(self, z: torch.Tensor) -> torch.Tensor:
        """Normalized then projected latents, any leading batch shape."""
        zn = layer_norm(z, self.input_ln_gain, self.input_ln_bias)
        return self.projection(zn)

    def contextualize(
        self,
        x: torch.Tensor,
        valid_lens: torch.Tensor,
        generator: torch.Generator | None = None,
        training: bool = False,
    ) -> torch.Tensor:
        """Run the positional embedding and transformer stack.

        x: (B, T, model_dim) projected (and possibly masked) latents.
        valid_lens: (B,) true frame counts; frames beyond them are padding.
        """
        b, t, _ = x.shape
        if int(valid_lens.min()) < 1:
            raise ValueError("an utterance in the batch is entirely padding")
        positions = torch.arange(t).unsqueeze(0)
        pad = positions >= valid_lens.unsqueeze(1)
        x = x * (~pad).unsqueeze(-1).to(x.dtype)
        x = x + self.pos_embedding(x)
        x = x * (~pad).unsqueeze(-1).to(x.dtype)
        for layer in self.layers:
            x = layer(x, pad, generator, training)
        return x

"""7-layer convolutional feature encoder: raw 16 kHz audio -> latents at 50 Hz.

Kernel sizes [10, 3, 3, 3, 3, 2, 2], strides [5, 2, 2, 2, 2, 2, 2] and
symmetric zero padding [3, 1, 1, 1, 1, 0, 0] give one latent vector per
320 input samples: T = floor(r / 320). For a 76-sample band below each
multiple of 320 the raw conv arithmetic produces one extra frame (the
interior layers round up, the last two round down); the encoder trims to
the floor law so T is exact for every input length. The first layer is
followed by per-channel GroupNorm (groups == channels) before the GELU;
all layers carry a bias. A gradient-scale layer (identity forward,
gradient times ``grad_scale`` backward) sits on the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .numerics import gelu_tanh, grad_scale, group_norm

KERNELS = (10, 3, 3, 3, 3, 2, 2)
STRIDES = (5, 2, 2, 2, 2, 2, 2)
PADDINGS = (3, 1, 1, 1, 1, 0, 0)
SAMPLES_PER_FRAME = 320


@dataclass
class EncoderConfig:
    channels: int = 512
    kernels: tuple[int, ...] = KERNELS
    strides: tuple[int, ...] = STRIDES
    paddings: tuple[int, ...] = PADDINGS
    grad_scale: float = 0.1

    def __post_init__(self) -> None:
        if not (len(self.kernels) == len(self.strides) == len(self.paddings) == 7):
            raise ValueError("encoder requires exactly 7 conv layers")
        if not (0.0 < self.grad_scale <= 1.0):
            raise ValueError(f"grad_scale must be in (0, 1], got {self.grad_scale}")


def output_length(r: int, config: EncoderConfig | None = None) -> int:
    """Latent frame count from an input of ``r`` samples, by per-layer arithmetic."""
    config = config or EncoderConfig()
    length = r
    for k, s, p in zip(config.kernels, config.strides, config.paddings):
        length = (length + 2 * p - k) // s + 1
    return length


def num_frames(r: int) -> int:
    """The closed-form frame count; equals :func:`output_length` for all valid r."""
    return r // SAMPLES_PER_FRAME


class FeatureEncoder(nn.Module):
    """Maps (batch, samples) waveforms to (batch, T, channels) latents."""

    def __init__(self, config: EncoderConfig, dtype: torch.dtype, generator: torch.Generator):
        super().__init__()
        self.config = config
        ch = config.channels
        self.convs = nn.ModuleList()
        in_ch = 1
        for k, s, p in zip(config.kernels, config.strides, config.paddings):
            conv = nn.Conv1d(in_ch, ch, k, stride=s, padding=p, bias=True, dtype=dtype)
            with torch.no_grad():
                bound = (in_ch * k) ** -0.5
                conv.weight.uniform_(-bound, bound, generator=generator)
                conv.bias.zero_()
            self.convs.append(conv)
            in_ch = ch
        self.norm_gain = nn.Parameter(torch.ones(ch, dtype=dtype))
        self.norm_bias = nn.Parameter(torch.zeros(ch, dtype=dtype))

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        if waveform.dim() != 2:
            raise ValueError(f"expected (batch, samples), got shape {tuple(waveform.shape)}")
        if waveform.shape[1] < SAMPLES_PER_FRAME:
            raise ValueError(
                f"waveform of {waveform.shape[1]} samples is below the minimum of "
                f"{SAMPLES_PER_FRAME} (one latent frame)"
            )
        x = waveform.unsqueeze(1)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i == 0:
                x = group_norm(x, groups=x.shape[1], gain=self.norm_gain, bias=self.norm_bias)
            x = gelu_tanh(x)
        x = x[:, :, : num_frames(waveform.shape[1])]
        x = grad_scale(x, self.config.grad_scale)
        return x.transpose(1, 2)

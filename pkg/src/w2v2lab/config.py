"""Flat key=value run configuration.

One text format drives pretraining, fine-tuning, and probing. Lines are
``key = value``; blank lines and ``#`` comments are ignored. Unknown keys
and type errors are rejected together, listing every offending key, so a
bad config fails in one round trip. Every run writes its resolved config
next to its outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import torch


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # global
    seed: int = 0
    dtype: str = "float64"  # float64 | float32

    # model dimensions
    encoder_channels: int = 512
    grad_scale: float = 0.1
    model_dim: int = 768
    layers: int = 12
    heads: int = 12
    ffn_dim: int = 2048
    dropout: float = 0.1
    pos_conv_kernel: int = 128
    pos_conv_groups: int = 16
    codebook_entries: int = 320
    codebook_dim: int = 128
    sim_dim: int = 256
    quantizer_bias_init: float = 2.0

    # pretext task
    mask_prob: float = 0.5
    mask_span: int = 10
    distractors: int = 100

    # quantizer temperature schedule
    tau_start: float = 2.0
    tau_floor: float = 0.5
    tau_floor_at: float = 0.75

    # pretraining loop
    batch_seconds: float = 6000.0  # aggregate, split across `accumulation` gpu-batches
    accumulation: int = 1
    iterations: int = 400_000
    lr_kind: str = "sub"  # const | sub | lin | manual
    max_lr: float = 0.0  # required when lr_kind = manual
    half_cycle: int = 25_000
    num_cycles: int = 8
    validate_every: int = 5000
    val_batch_seconds: float = 0.0  # 0 -> use the per-gpu-batch threshold
    select_best_on: str = "ssl"  # ssl | contrastive

    # optimizer
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.01

    # batch assembly
    bin_size: int = 5000
    queue_size: int = 50
    max_spread_seconds: float = 10.0

    # fine-tuning
    ft_steps: int = 12_000
    ft_batch_seconds: float = 200.0
    ft_base_lr: float = 5e-7
    ft_peak_lr: float = 5e-5
    ft_final_lr: float = 2.5e-6
    ft_warmup_frac: float = 0.1
    ft_hold_frac: float = 0.4
    ft_freeze_steps: int = 5000
    ft_mask_prob: float = 0.05
    ft_dropout: float = 0.1

    def torch_dtype(self) -> torch.dtype:
        if self.dtype == "float64":
            return torch.float64
        if self.dtype == "float32":
            return torch.float32
        raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def gpu_batch_seconds(self) -> float:
        return self.batch_seconds / self.accumulation

    def validate(self) -> None:
        problems = []
        if self.dtype not in ("float64", "float32"):
            problems.append(f"dtype: must be float64 or float32, got {self.dtype!r}")
        if self.lr_kind not in ("const", "sub", "lin", "manual"):
            problems.append(f"lr_kind: must be const, sub, lin or manual, got {self.lr_kind!r}")
        if self.lr_kind == "manual" and self.max_lr <= 0:
            problems.append("max_lr: must be positive when lr_kind = manual")
        if self.select_best_on not in ("ssl", "contrastive"):
            problems.append(f"select_best_on: must be ssl or contrastive, got {self.select_best_on!r}")
        if self.accumulation < 1:
            problems.append("accumulation: must be >= 1")
        if self.batch_seconds <= 0:
            problems.append("batch_seconds: must be positive")
        if not (0.0 < self.mask_prob <= 1.0):
            problems.append("mask_prob: must be in (0, 1]")
        if self.mask_span < 1:
            problems.append("mask_span: must be >= 1")
        if self.distractors < 0:
            problems.append("distractors: must be >= 0")
        if not (0.0 < self.tau_floor <= self.tau_start):
            problems.append("tau schedule: need 0 < tau_floor <= tau_start")
        if not (0.0 < self.tau_floor_at <= 1.0):
            problems.append("tau_floor_at: must be in (0, 1]")
        if self.model_dim % self.heads != 0:
            problems.append("model_dim: must be divisible by heads")
        if self.pos_conv_kernel % 2 != 0:
            problems.append("pos_conv_kernel: must be even")
        if not (0.0 < self.ft_warmup_frac and self.ft_warmup_frac + self.ft_hold_frac < 1.0):
            problems.append("ft_warmup_frac/ft_hold_frac: warmup + hold must stay below 1")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    target = _FIELD_TYPES[key]
    if target == "int":
        return int(raw)
    if target == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, object] = {}
    problems: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(key, value)
        except ValueError:
            problems.append(f"{source}:{lineno}: cannot parse {value!r} for key {key!r}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), source=str(path))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` strings on top of a parsed config."""
    problems = []
    values = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r}: expected key=value")
            continue
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in _FIELD_TYPES:
            problems.append(f"override: unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(key, value)
        except ValueError:
            problems.append(f"override: cannot parse {value!r} for key {key!r}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    out = RunConfig(**values)
    out.validate()
    return out


def config_text(cfg: RunConfig) -> str:
    """Canonical serialization (field order, repr values)."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config_text(cfg))


def config_dict(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}


def config_from_dict(d: dict) -> RunConfig:
    unknown = [k for k in d if k not in _FIELD_TYPES]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = RunConfig(**d)
    cfg.validate()
    return cfg

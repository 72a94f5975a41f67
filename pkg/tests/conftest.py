import numpy as np
import pytest
import torch

from w2v2lab.config import RunConfig
from w2v2lab.dataset import split_validation, synth_corpus


def tiny_config(**overrides) -> RunConfig:
    """A float64 model small enough for finite differences and fast tests."""
    base = dict(
        seed=0,
        dtype="float64",
        encoder_channels=8,
        grad_scale=0.1,
        model_dim=8,
        layers=2,
        heads=2,
        ffn_dim=16,
        dropout=0.1,
        pos_conv_kernel=4,
        pos_conv_groups=2,
        codebook_entries=4,
        codebook_dim=3,
        sim_dim=5,
        mask_prob=0.5,
        mask_span=2,
        distractors=2,
        batch_seconds=4.0,
        accumulation=1,
        iterations=100,
        lr_kind="manual",
        max_lr=1e-3,
        half_cycle=10,
        num_cycles=8,
        validate_every=50,
    )
    base.update(overrides)
    return RunConfig(**base)


def toy_config(**overrides) -> RunConfig:
    """The learnable desk-scale preset used by the experiment-style tests."""
    base = dict(
        seed=0,
        dtype="float32",
        encoder_channels=32,
        grad_scale=0.1,
        model_dim=48,
        layers=2,
        heads=4,
        ffn_dim=96,
        dropout=0.0,
        pos_conv_kernel=16,
        pos_conv_groups=4,
        codebook_entries=16,
        codebook_dim=8,
        sim_dim=16,
        mask_prob=0.5,
        mask_span=10,
        distractors=5,
        batch_seconds=10.0,
        accumulation=1,
        iterations=2000,
        lr_kind="manual",
        max_lr=2e-3,
        half_cycle=250,
        num_cycles=8,
        validate_every=500,
        val_batch_seconds=10.0,
        ft_steps=300,
        ft_batch_seconds=20.0,
        ft_peak_lr=1e-3,
        ft_base_lr=1e-5,
        ft_final_lr=5e-5,
        ft_freeze_steps=50,
        ft_dropout=0.0,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Deterministic synthetic corpus shared by the slower tests."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = synth_corpus(seed=11, count=40, out_dir=root, min_dur=2.0, max_dur=6.0)
    train, val = split_validation(manifest, 0.1, np.random.default_rng(11))
    return train, val


@pytest.fixture()
def gen():
    return torch.Generator().manual_seed(1234)

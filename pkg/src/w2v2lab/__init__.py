"""Desk-scale contrastive speech pretraining and CTC fine-tuning lab."""

__version__ = "0.1.0"

"""Preference-aware self-distillation for segmentation with imbalanced missing modalities."""

__version__ = "0.1.0"

"""Sequence-consistency pre-training for a toy DETR-style detector."""

__version__ = "0.1.0"

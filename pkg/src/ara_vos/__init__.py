"""Adversarial region attacks against a toy matching-based video segmenter."""

__version__ = "0.1.0"

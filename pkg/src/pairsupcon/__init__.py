"""Pair-supervised contrastive sentence embeddings with an evaluation harness."""

__version__ = "0.1.0"

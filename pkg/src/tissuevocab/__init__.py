"""Unsupervised tissue vocabularies for multi-sequence volumes, and the analyses built on them."""

__version__ = "0.1.0"

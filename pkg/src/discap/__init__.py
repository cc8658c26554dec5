"""Discriminability-aware image captioning on a synthetic scene world."""

__version__ = "0.1.0"

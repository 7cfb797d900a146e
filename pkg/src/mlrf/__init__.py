"""Sequence-to-sequence Transformer with pluggable multi-layer representation fusion."""

__version__ = "0.1.0"

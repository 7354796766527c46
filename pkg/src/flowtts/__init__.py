"""Toy-scale joint autoregressive + flow-matching TTS pipeline."""

__version__ = "0.1.0"

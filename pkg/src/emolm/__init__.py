"""Emotion-conditioned dialogue language modeling at desk scale."""

__version__ = "0.1.0"

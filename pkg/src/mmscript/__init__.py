"""Multimedia generative script learning at desk scale."""

__version__ = "0.1.0"

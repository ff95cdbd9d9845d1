"""Inpainting pre-trained encoders for individual identification from skin patterns."""

__version__ = "0.1.0"

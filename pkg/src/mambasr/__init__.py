"""Selective-scan (Mamba-style) super-resolution for single-channel images, in numpy."""

__version__ = "0.1.0"

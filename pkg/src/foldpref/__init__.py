"""Preference alignment of diffusion policies on a toy garment-folding simulator."""

__version__ = "0.1.0"

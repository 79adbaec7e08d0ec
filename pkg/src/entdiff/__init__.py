"""Absorbing-state discrete diffusion for heterogeneous structured entities."""

__version__ = "0.1.0"

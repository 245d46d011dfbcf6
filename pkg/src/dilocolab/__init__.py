"""Desk-scale laboratory for DiLoCo-style low-communication training."""

__version__ = "0.1.0"

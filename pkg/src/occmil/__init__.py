"""Attention MIL with one-class pseudo-labels for slide-level biomarker prediction."""

__version__ = "0.1.0"

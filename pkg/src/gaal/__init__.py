"""Gradient-aligned alternating learning for paired image-vector / tabular classification."""

__version__ = "0.1.0"

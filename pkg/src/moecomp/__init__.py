"""Mixture-of-Experts weight compression with frequency- and rank-aware allocation."""

__version__ = "0.1.0"

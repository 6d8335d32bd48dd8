"""Desk-scale energy-based model training toolkit."""

__version__ = "0.1.0"

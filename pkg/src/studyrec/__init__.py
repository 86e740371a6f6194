"""Socially-aware sequential recommendation with temporally-causal attention."""

__version__ = "0.1.0"

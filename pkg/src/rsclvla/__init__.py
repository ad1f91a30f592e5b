"""Desk-scale state-weighted contrastive regularization for chunked flow-matching policies."""

__version__ = "0.1.0"

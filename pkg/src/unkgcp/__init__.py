"""Conformal prediction intervals for uncertain knowledge graph embeddings."""

__version__ = "0.1.0"

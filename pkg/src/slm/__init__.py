"""Structured language model with enriched syntactic dependencies."""

__version__ = "0.1.0"

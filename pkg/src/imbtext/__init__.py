"""Imbalanced high-cardinality text classification toolkit."""

__version__ = "0.1.0"

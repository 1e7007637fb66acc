"""Identification of iterated maps with symbolic neural networks."""

__version__ = "0.1.0"

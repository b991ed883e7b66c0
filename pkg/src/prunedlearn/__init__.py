"""Pruned one-hidden-layer ReLU network learning toolkit."""

__version__ = "0.1.0"

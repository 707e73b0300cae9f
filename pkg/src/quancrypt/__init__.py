"""Federated learning with quantized, pruned, CKKS-encrypted model updates."""

__version__ = "0.1.0"

"""Federated and local training of linear EMG-to-cursor decoders, with synthetic subjects."""

__version__ = "0.1.0"

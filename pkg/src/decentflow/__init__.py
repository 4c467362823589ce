"""Decentralized flow-matching experts with a noise-aware router."""

__version__ = "0.1.0"

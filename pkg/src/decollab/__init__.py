"""Decentralized and centralized multi-agent training of token-sequence policies."""

__version__ = "0.1.0"

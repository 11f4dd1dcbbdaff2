"""Multiplicative gain adapters and additive baselines for sequential domain adaptation on a small GPT."""

__version__ = "0.1.0"

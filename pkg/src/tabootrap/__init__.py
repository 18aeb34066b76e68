"""Taboo-trap adversarial detection: activation-restricted training and zero-cost inference checks."""

__version__ = "0.1.0"

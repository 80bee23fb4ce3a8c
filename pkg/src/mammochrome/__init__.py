"""Learnable chromatic encoding for mammography triage."""

__version__ = "0.1.0"

"""Deterministic multi-vehicle autonomous racing simulation stack."""

__version__ = "0.1.0"

"""Deterministic multi-ledger federation sandbox."""

__version__ = "0.1.0"

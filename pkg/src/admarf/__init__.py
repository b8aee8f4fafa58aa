"""Autonomic policy interpreter and a deterministic pipeline simulator."""

__version__ = "0.1.0"

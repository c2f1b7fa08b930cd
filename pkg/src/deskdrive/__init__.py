"""Desk-scale autonomous-driving stack: numerics, perception, decision, planning."""

__version__ = "0.1.0"

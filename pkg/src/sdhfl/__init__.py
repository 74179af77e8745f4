"""Evolutionary edge association and synthetic-data hierarchical FL simulator."""

__version__ = "0.1.0"

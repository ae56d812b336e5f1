"""Tile-level spectrum demand estimation with hierarchical graph attention."""

__version__ = "0.1.0"

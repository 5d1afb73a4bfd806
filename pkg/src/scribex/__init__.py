"""Scribble-supervised target extraction for overhead imagery, desk scale."""

__version__ = "0.1.0"

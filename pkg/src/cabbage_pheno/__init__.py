"""Cabbage head volume and leaf area from a downward-looking monocular video."""

__version__ = "0.1.0"

"""Unravelings of canonical quantum master equations."""

__version__ = "0.1.0"

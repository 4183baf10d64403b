"""Defensive skill analytics from player tracking data."""

__version__ = "0.1.0"

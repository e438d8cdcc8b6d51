"""Noisy escape from a stable focus through an unstable limit cycle."""

__version__ = "0.1.0"

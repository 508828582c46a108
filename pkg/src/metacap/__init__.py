"""Metadata-based music captioning toolkit and evaluation harness."""

__version__ = "0.1.0"

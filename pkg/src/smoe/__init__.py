"""Sparse mixture-of-experts transformer engine with routing and long-context analysis tools."""

__version__ = "0.1.0"

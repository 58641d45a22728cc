"""Retrieval-based sparse attention over a query-guided key graph."""

__version__ = "0.1.0"

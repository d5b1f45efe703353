"""Weakly supervised multi-view context-clustering classifier for four-view mammography."""

__version__ = "0.1.0"

"""Depth-guided any-to-any image relighting with a single-stream encoder-decoder."""

__version__ = "0.1.0"

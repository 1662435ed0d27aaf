"""Adaptive attention spans, alpha-entmax and LayerDrop in a small
two-stream vision-and-language encoder."""

__version__ = "0.1.0"

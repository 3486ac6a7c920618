"""Desk-scale region-aware vision-language model with RGB and depth pathways."""

__version__ = "0.1.0"

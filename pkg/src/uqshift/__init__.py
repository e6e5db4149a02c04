"""Desk-scale benchmark of posterior approximations for segmentation under distribution shift."""

__version__ = "0.1.0"

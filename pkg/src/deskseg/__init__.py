"""Desk-scale mask-classification instance segmentation on a tiny autodiff core."""

__version__ = "0.1.0"

"""Confidence-based Mixup instruction tuning on a micro decoder-only transformer."""

__version__ = "0.1.0"

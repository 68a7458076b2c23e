"""Rotated-box detection toolkit: geometry, anchors, pooling, losses,
evaluation, tracking and a synthetic-data toy detector."""

__version__ = "0.1.0"

"""Patch-attack feasibility bounds and a desk-scale segmentation attack testbed."""

__version__ = "0.1.0"

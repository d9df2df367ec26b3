"""Desk-scale deterministic multi-view BEV 3D detection pipeline."""

__version__ = "0.1.0"

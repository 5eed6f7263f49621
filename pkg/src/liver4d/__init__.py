"""Predict 3D liver MRI from a 2D navigator slice with a per-subject U-Net."""

__version__ = "0.1.0"

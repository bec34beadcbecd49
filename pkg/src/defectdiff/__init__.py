"""Diffusion-based minority-class augmentation for imbalanced defect datasets."""

__version__ = "0.1.0"

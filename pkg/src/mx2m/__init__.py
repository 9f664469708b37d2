"""Masked cross-modality modeling for 2D/3D domain-adaptive segmentation, at desk scale."""

__version__ = "0.1.0"

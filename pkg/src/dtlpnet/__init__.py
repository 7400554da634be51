"""Semi-supervised volumetric segmentation with dual-teacher pseudo-labels
and voxel-level label propagation."""

__version__ = "0.1.0"

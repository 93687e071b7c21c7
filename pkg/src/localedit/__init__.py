"""Instruction-localized diffusion editing of images and voxel radiance fields."""

__version__ = "0.1.0"

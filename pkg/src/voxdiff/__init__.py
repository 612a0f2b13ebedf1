"""Diffusion-refined 3D semantic occupancy prediction on voxel grids."""

__version__ = "0.1.0"

"""Hybrid 3D/2D Gaussian splatting."""

"""Neighbourhood-guided autoregressive generation of 3D molecular point clouds."""

__version__ = "0.1.0"

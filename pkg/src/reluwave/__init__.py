"""Rectifier wavelet frames, manifold atlases and explicit depth-4 ReLU networks."""

__version__ = "0.1.0"

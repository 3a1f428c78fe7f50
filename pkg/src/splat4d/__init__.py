"""Per-frame reconstruction of dynamic scenes as moving 3D Gaussians."""

__version__ = "0.1.0"

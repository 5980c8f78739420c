"""Point-based multi-task LiDAR perception on synthetic scenes.

Neighborhood-attention encoder over voxel-grid point windows, U-Net style
pooling pyramid, per-point semantic head, and a query-based detection head
with deformable cross-attention. Everything runs on dense float64 numpy
through a small reverse-mode autodiff engine, so the full pipeline is
trainable end-to-end and checkable against finite differences.
"""

__version__ = "0.1.0"

"""Neural multiresolution voxel RGB-D SLAM."""

__version__ = "0.1.0"

"""Quality-diversity brain-body co-optimization of 2D voxel soft robots."""

__version__ = "0.1.0"

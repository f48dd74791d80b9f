"""Knowledge distillation from cylindrical voxel features to polar BEV features
for LiDAR semantic segmentation, on a small numpy autodiff engine."""

__version__ = "0.1.0"

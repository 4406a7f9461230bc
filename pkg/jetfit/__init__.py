"""Neural-weighted n-jet fitting for point cloud normals and curvatures."""

__version__ = "0.1.0"

"""Open-world voxel radiance-field RGB-D SLAM."""

"""Terrain-aware LiDAR-inertial odometry with an RBF terrain manifold."""

__version__ = "0.1.0"

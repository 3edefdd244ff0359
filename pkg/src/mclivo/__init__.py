"""Multi-camera LiDAR-inertial-visual odometry with a synthetic test bench."""

__version__ = "0.1.0"

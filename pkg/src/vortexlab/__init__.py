"""Contrastive spatio-temporal learning for wake-vortex LiDAR scans."""

__version__ = "0.1.0"

"""Streaming LiDAR object detection from rolling-shutter packets."""

__version__ = "0.1.0"

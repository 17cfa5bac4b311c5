"""Adaptive multiresolution finite volumes with local time-stepping."""

__version__ = "0.1.0"

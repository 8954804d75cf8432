"""Rotation-invariant global descriptors for polar radar scans."""

__version__ = "0.1.0"

"""Symplectomorphic registration of volumetric images."""

__version__ = "0.1.0"

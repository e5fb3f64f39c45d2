"""Exposure density: land-use-aware mobility activity, change vectors,
neighborhood clustering and outcome models."""

__version__ = "0.1.0"

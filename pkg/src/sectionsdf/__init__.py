"""Neural signed distance fields reconstructed from planar cross-sections."""

__version__ = "0.1.0"

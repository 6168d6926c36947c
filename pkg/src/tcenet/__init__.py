"""Point cloud classification and segmentation with channel-encoding attention."""

__version__ = "0.1.0"

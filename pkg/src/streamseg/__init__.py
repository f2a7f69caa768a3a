"""Two-stream video object segmentation with instance-aware fusion."""

__version__ = "0.1.0"

"""Cross-view 3-DoF localisation against rasterised OpenStreetMap tiles."""

__version__ = "0.1.0"

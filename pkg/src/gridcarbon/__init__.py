"""Gridded carbon-emission regression from satellite tiles and POI rasters."""

__version__ = "0.1.0"

"""Desk-scale BEV 3D detection with a historical-object-prediction auxiliary
task and temporal query fusion, on synthetic planar scenes."""

__version__ = "0.1.0"

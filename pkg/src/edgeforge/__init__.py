"""3D edge reconstruction from 2D edge-graphs, camera poses and sparse points."""

__version__ = "0.1.0"

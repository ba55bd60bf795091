"""Lowest-order virtual elements on polygonal meshes with a reduced-basis
stabilization and conforming post-processing of the vertex solution."""

__version__ = "0.1.0"

"""Spectral laboratory for complex geometrical optics, Carleman and DN-map experiments."""
__version__ = "0.1.0"

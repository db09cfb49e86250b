"""Polarimetric forward renderer and inverse material solver for conductors and dielectrics."""

__version__ = "0.1.0"

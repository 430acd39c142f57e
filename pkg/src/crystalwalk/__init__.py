"""Grover walks on crystal lattices: twisted Bloch operators, dispersion,
pseudo-velocity orbits and direct real-space simulation."""

__version__ = "0.1.0"

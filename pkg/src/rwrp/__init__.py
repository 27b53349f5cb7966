"""Quenched free energies of random walks in random potentials."""

__version__ = "0.1.0"

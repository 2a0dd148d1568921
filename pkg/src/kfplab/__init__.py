"""Numerical laboratory for stationary kinetic Fokker-Planck Dirichlet problems."""

__version__ = "0.1.0"

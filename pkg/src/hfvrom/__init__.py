"""Hybrid finite volume / finite element solver with a POD-Galerkin reduced model."""

__version__ = "0.1.0"

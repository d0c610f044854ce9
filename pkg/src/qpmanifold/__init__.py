"""Quasiperiodic solutions of constrained mechanical systems on hypersurfaces.

Modules: geometry, system, bounds, hypotheses, dynamics, finder, dichotomy,
sphere_case, cli.
"""
__version__ = "0.1.0"

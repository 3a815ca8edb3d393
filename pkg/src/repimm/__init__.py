"""Toolkit for spatial immigration under repulsion: kinetic solvers, two-patch
dynamics, exact microscopic simulation and the mesoscopic comparison."""

__version__ = "0.1.0"

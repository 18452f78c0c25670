"""Gradient flows, their energies, and numerical certificates of parabolic minimality."""

from . import discretization, fields, flows, functionals, gamma, minimality

__all__ = ["discretization", "fields", "flows", "functionals", "gamma", "minimality"]
__version__ = "0.1.0"

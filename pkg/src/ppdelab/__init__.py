"""Numerical laboratory for path-dependent PDEs, BSDEs and their viscosity solutions."""
from . import bank_baum, bsde, catalog, functional_calculus, paths, stochastics, viscosity
from .paths import DiscretePath, PathFunctional, PathPoint, TimeGrid

__version__ = "0.1.0"

__all__ = ["bank_baum", "bsde", "catalog", "viscosity", "functional_calculus", "paths", "stochastics",
           "DiscretePath", "PathFunctional", "PathPoint", "TimeGrid"]

"""Numerical deformation retraction of sphere diffeomorphisms onto SO(3)."""

from .diffeo_engine import DiffeoChain
from .estimators import SphereRetraction, SquareRetraction
from .specfile import build_chain, load_spec

__all__ = ["DiffeoChain", "SphereRetraction", "SquareRetraction", "build_chain", "load_spec"]
__version__ = "0.1.0"

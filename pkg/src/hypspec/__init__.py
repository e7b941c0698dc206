"""Bottom of the Laplace spectrum for hyperbolic surfaces glued from copies of one cell."""

from .config import NumericalError, ValidationError, TOL
from .hyp_core import CellSpec, collar_halfwidth
from .graph_spectra import Graph, build_graph, mu0, cheeger

__all__ = ["NumericalError", "ValidationError", "TOL", "CellSpec", "collar_halfwidth",
           "Graph", "build_graph", "mu0", "cheeger"]

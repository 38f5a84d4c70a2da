"""Stochastic analysis on the path space of a Riemannian manifold.

Brownian motion is built by rolling a flat Wiener path onto an embedded
manifold through its orthonormal frame bundle.  On top of that sit the
flow of Cameron-Martin vector fields and its quasi-invariance, path-space
gradients with their integration by parts formulas, and anticipative
integrals.

Batch arrays put the path index last: a path batch is (n+1, k, P), frames
are (n+1, N, d, P).
"""

__version__ = "0.1.0"

from .errors import (
    AnticipativeShiftError,
    ConfigurationError,
    ContractError,
    DomainError,
    IntegrationError,
    PathflowError,
    SolverError,
    UnsupportedShapeError,
)
from .geometry import Frame, ManifoldSpec, SkewMatrix, make_manifold, parse_manifold
from .lift import FramePath, develop, horizontal_lift, parallel_transport, roll
from .wiener import CMShift, DiscretePath, TimeGrid, make_cm_shift, sample_brownian

__all__ = [
    "AnticipativeShiftError",
    "CMShift",
    "ConfigurationError",
    "ContractError",
    "DiscretePath",
    "DomainError",
    "Frame",
    "FramePath",
    "IntegrationError",
    "ManifoldSpec",
    "PathflowError",
    "SkewMatrix",
    "SolverError",
    "TimeGrid",
    "UnsupportedShapeError",
    "develop",
    "horizontal_lift",
    "make_cm_shift",
    "make_manifold",
    "parallel_transport",
    "parse_manifold",
    "roll",
    "sample_brownian",
]

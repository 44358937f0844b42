"""Numerical laboratory for hyperbolic billiards with singularities.

Builds billiard tables, iterates the collision map, induces first-return
systems on reduced phase spaces, and estimates the statistics that drive
their mixing behaviour: return-time tails, cell measures and diameters,
correlation decay rates, and expansion diagnostics.
"""

__version__ = "0.1.0"

from .geometry import TableSpec, TableGeometry, build_table, point_normal_curvature
from .dynamics import PhasePoint, billiard_map, involution, reflect, next_collision
from .induced import ReducedSpaceRule, InducedStep, first_return, induced_orbit

__all__ = [
    "__version__",
    "TableSpec", "TableGeometry", "build_table", "point_normal_curvature",
    "PhasePoint", "billiard_map", "involution", "reflect", "next_collision",
    "ReducedSpaceRule", "InducedStep", "first_return", "induced_orbit",
]

"""Observables on the reduced phase space, evaluated on induced steps.

The return time R is the prototype unbounded observable: it equals n on
every cell with return time n, so its growth envelope constant is exactly 1.
Smooth functions on the full phase space are pushed onto the induced system
as excursion sums; the summation range 0..R includes both endpoints (the
half-open 0..R-1 variant is available via ``endpoint_mode``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from .dynamics import PhasePoint
from .geometry import TableGeometry
from .induced import InducedStep


def return_time(step: InducedStep) -> float:
    """The index function: R on the cell containing the step's start."""
    return float(step.R)


def truncated_return_time(step: InducedStep, cap_T: int) -> float:
    """min(R, cap_T); cap_T >= 1."""
    if cap_T < 1:
        raise ValueError("cap_T must be >= 1")
    return float(min(step.R, cap_T))


def free_path(step: InducedStep) -> float:
    """Total flight length of the excursion."""
    return step.path_tau_sum


def induced_sum(fhat: Callable[[PhasePoint], float], step: InducedStep,
                endpoint_mode: str = "inclusive") -> float:
    """Sum of fhat along the excursion F^0 x .. F^R x.

    ``inclusive`` sums m = 0..R (both endpoints, R+1 terms); ``half-open``
    sums m = 0..R-1.
    """
    if step.path is None:
        raise ValueError("induced_sum needs a step recorded with keep_path=True")
    pts = step.path if endpoint_mode == "inclusive" else step.path[:-1]
    return sum(fhat(p) for p in pts)


@dataclass(frozen=True)
class Observable:
    """Named evaluation rule on induced steps with declared tail class.

    tail is 'bounded' (with ``bound``) or 'polynomial' (with ``tail_exponent``
    hint); the class is metadata used for reporting, not enforced.
    """

    name: str
    fn: Callable[[InducedStep], float]
    tail: str = "bounded"
    bound: Optional[float] = None
    tail_exponent: Optional[float] = None
    needs_path: bool = False

    def __call__(self, step: InducedStep) -> float:
        return self.fn(step)


def _fhat_by_name(table: TableGeometry, name: str) -> Callable[[PhasePoint], float]:
    if name == "cos_phi":
        return lambda p: math.cos(p.phi)
    if name == "cos_r":
        L = table.total_length
        return lambda p: math.cos(2.0 * math.pi * table.global_r(p.component, p.r) / L)
    if name == "const":
        return lambda p: 1.0
    raise ValueError(f"unknown induced_sum kernel {name!r}; "
                     "expected cos_phi, cos_r or const")


def make_observable(table: TableGeometry, name: str,
                    cap_T: Optional[int] = None,
                    fhat: Optional[str] = None,
                    endpoint_mode: str = "inclusive") -> Observable:
    """Observable factory for the names accepted in experiment configs.

    Supported: ``R``, ``R_trunc`` (needs cap_T), ``free_path``,
    ``induced_sum`` (needs fhat in {cos_phi, cos_r, const}).
    """
    if name == "R":
        return Observable(name="R", fn=return_time, tail="polynomial",
                          tail_exponent=2.0)
    if name == "R_trunc":
        if cap_T is None:
            raise ValueError("R_trunc needs cap_T")
        cap = int(cap_T)
        return Observable(name=f"R_trunc({cap})",
                          fn=lambda s: truncated_return_time(s, cap),
                          tail="bounded", bound=float(cap))
    if name == "free_path":
        return Observable(name="free_path", fn=free_path, tail="polynomial",
                          tail_exponent=2.0)
    if name == "induced_sum":
        if fhat is None:
            raise ValueError("induced_sum needs fhat")
        kern = _fhat_by_name(table, fhat)
        return Observable(name=f"induced_sum({fhat})",
                          fn=lambda s: induced_sum(kern, s, endpoint_mode),
                          tail="polynomial", tail_exponent=2.0, needs_path=True)
    raise ValueError(f"unknown observable {name!r}")


def point_observable(name: str, fn: Callable[[PhasePoint], float],
                     bound: Optional[float] = None) -> Observable:
    """Bounded observable of the step's start point (e.g. cos phi)."""
    return Observable(name=name, fn=lambda s: fn(s.start), tail="bounded",
                      bound=bound)

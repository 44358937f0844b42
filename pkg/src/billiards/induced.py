"""Induced first-return systems on reduced phase spaces.

The reduced space M is selected by a per-family membership rule; the first
return map T = F^R iterates the collision map until the orbit re-enters M.
Excursions are summarized as InducedStep records carrying the return time,
total flight length, itinerary signature and (optionally) the full path.

Return-time level sets are organized into cells by itinerary class: two
steps share a cell ordinal j at return time n exactly when the component
sequences of their excursions agree.  Itinerary classes are a computable
surrogate for the connected components of {R = n}; the registry measures
the multiplicity n0 rather than assuming it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import (HALF_PI, PhasePoint, _step_raw, billiard_map, involution)
from .errors import (BilliardError, CornerHit, NearTangency, NoConvergence,
                     NoIntersection, NoReturnWithinCap, OutOfRange,
                     SingularNeighborhood, SingularOrbit)
from .geometry import TableGeometry

DEFAULT_CAP = 10 ** 6

_SINGULAR = (NearTangency, CornerHit, NoIntersection, NoConvergence)


@dataclass(frozen=True)
class ReducedSpaceRule:
    """Membership predicate for the reduced phase space M.

    kinds:
      obstacle-collisions   Sinai table; collisions on the obstacle circle.
      arc-first-collisions  stadium; collisions on an arc whose predecessor
                            was on a different component.
      cusp-exterior         cusp table; collisions farther than
                            delta_cusp * component length from each cusp.
      flat-exterior         flat-point table; collisions farther than
                            delta_flat (arc length; None = half component
                            length, i.e. the whole flat wall is excluded)
                            from the flat point.
    """

    kind: str
    delta_cusp: float = 0.05
    delta_flat: Optional[float] = None

    def key(self):
        return (self.kind, self.delta_cusp, self.delta_flat)


def default_rule(table: TableGeometry) -> ReducedSpaceRule:
    return ReducedSpaceRule(kind=table.default_rule)


def candidate_components(table: TableGeometry, rule: ReducedSpaceRule):
    """Components that can host points of M (used by the rejection sampler)."""
    if rule.kind == "obstacle-collisions":
        return [c.index for c in table.components
                if c.closed and c.curvature_class == "dispersing"]
    if rule.kind == "arc-first-collisions":
        return [c.index for c in table.components if c.kind == "circular-arc"]
    if rule.kind == "cusp-exterior":
        return [c.index for c in table.components]
    if rule.kind == "flat-exterior":
        return [c.index for c in table.components]
    raise BilliardError(f"unknown reduced-space rule {rule.kind!r}")


def _member_static(table, rule, comp, r):
    """Membership for rules decidable from the point alone (no history)."""
    kind = rule.kind
    c = table.components[comp]
    if kind == "obstacle-collisions":
        return c.closed and c.curvature_class == "dispersing"
    if kind == "cusp-exterior":
        return min(r, c.length - r) > rule.delta_cusp * c.length
    if kind == "flat-exterior":
        if c.kind != "flat-curve":
            return True
        delta = rule.delta_flat if rule.delta_flat is not None else 0.5 * c.length
        return abs(r - 0.5 * c.length) >= delta
    if kind == "arc-first-collisions":
        return c.kind == "circular-arc"   # necessary condition only
    raise BilliardError(f"unknown reduced-space rule {rule.kind!r}")


def _needs_history(rule: ReducedSpaceRule) -> bool:
    return rule.kind == "arc-first-collisions"


def in_reduced_space(table: TableGeometry, rule: ReducedSpaceRule,
                     x: PhasePoint) -> bool:
    """Does x belong to M?  May take one backward step of F."""
    if not _member_static(table, rule, x.component, x.r):
        return False
    if not _needs_history(rule):
        return True
    prev, _ = billiard_map(table, involution(x))   # F^{-1} x, time-reversed
    return prev.component != x.component


def _member_with_prev(table, rule, comp, r, prev_comp):
    if not _member_static(table, rule, comp, r):
        return False
    if _needs_history(rule):
        return prev_comp != comp
    return True


@dataclass(frozen=True)
class InducedStep:
    """One application of T = F^R: start in M, excursion, return to M.

    ``signature`` is the itinerary-class key used by the cell enumeration:
    one token 6*component + tag per collision.  The tag records the arc
    direction of same-component repeats (tag 1/2: mirror sliding series on
    a focusing arc run clockwise or counterclockwise) and the reflection-
    angle sign of segment collisions (tag 3/4: corridor cells drifting left
    or right are separated by the infinite-return vertical family, where
    phi of every wall collision vanishes).  A deadband keeps exactly
    symmetric orbits stable against roundoff; long excursions are truncated
    head/tail since their middles are forced alternations.
    """

    start: PhasePoint
    R: int
    end: PhasePoint
    path_tau_sum: float
    min_singularity_distance: float
    itinerary: tuple                     # component ids of F^0 x .. F^R x
    signature: tuple = ()
    path: Optional[tuple] = None         # PhasePoints F^0 x .. F^R x
    taus: Optional[tuple] = None         # flight lengths of the R sub-steps


def first_return(table: TableGeometry, rule: ReducedSpaceRule, x: PhasePoint,
                 cap: int = DEFAULT_CAP, keep_path: bool = False) -> InducedStep:
    """Iterate F from x in M until the orbit re-enters M.

    Raises NoReturnWithinCap if R would exceed ``cap`` and SingularOrbit if
    the excursion is terminated by a singularity neighbourhood.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    comp, r, phi = x
    is_seg = table._is_segment
    itinerary = [comp]
    tokens = [6 * comp + _seg_tag(is_seg[comp], phi)]
    path = [x] if keep_path else None
    taus = [] if keep_path else None
    tau_sum = 0.0
    min_sing = min(HALF_PI - abs(phi), table.junction_distance(comp, r))
    step = _step_raw
    prev_comp = comp
    prev_r = r
    for k in range(1, cap + 1):
        try:
            comp, r, phi, tau, _, _ = step(table, comp, r, phi)
        except _SINGULAR as e:
            raise SingularOrbit(f"excursion terminated after {k - 1} steps",
                                steps_done=k - 1, cause=e) from e
        tau_sum += tau
        itinerary.append(comp)
        if comp == prev_comp:
            tokens.append(6 * comp + (1 if r > prev_r else 2))
        else:
            tokens.append(6 * comp + _seg_tag(is_seg[comp], phi))
        prev_r = r
        if keep_path:
            path.append(PhasePoint(comp, r, phi))
            taus.append(tau)
        local = min(HALF_PI - abs(phi), table.junction_distance(comp, r))
        if local < min_sing:
            min_sing = local
        if _member_with_prev(table, rule, comp, r, prev_comp):
            return InducedStep(start=x, R=k, end=PhasePoint(comp, r, phi),
                               path_tau_sum=tau_sum,
                               min_singularity_distance=min_sing,
                               itinerary=tuple(itinerary),
                               signature=signature_of(tuple(tokens)),
                               path=tuple(path) if keep_path else None,
                               taus=tuple(taus) if keep_path else None)
        prev_comp = comp
    raise NoReturnWithinCap(f"no return within cap={cap}", cap=cap)


def first_return_backward(table: TableGeometry, rule: ReducedSpaceRule,
                          x: PhasePoint, cap: int = DEFAULT_CAP) -> PhasePoint:
    """T^{-1} x: iterate F^{-1} = iota F iota until the orbit re-enters M.

    For history-dependent rules (arc-first-collisions) membership of a
    backward point needs its own predecessor, which is the next point the
    backward iteration produces, so the scan looks one step ahead.
    """
    need_hist = _needs_history(rule)
    comp, r, phi = involution(x)
    step = _step_raw
    prev = None        # the k-1st backward point awaiting its predecessor
    for k in range(1, cap + 2):
        try:
            comp, r, phi, _, _, _ = step(table, comp, r, phi)
        except _SINGULAR as e:
            raise SingularOrbit(f"backward excursion terminated after {k - 1} steps",
                                steps_done=k - 1, cause=e) from e
        if not need_hist:
            if _member_static(table, rule, comp, r):
                return involution(PhasePoint(comp, r, phi))
            if k == cap:
                break
            continue
        if prev is not None and _member_with_prev(table, rule, prev.component,
                                                  prev.r, comp):
            return involution(prev)
        prev = PhasePoint(comp, r, phi)
    raise NoReturnWithinCap(f"no backward return within cap={cap}", cap=cap)


def induced_orbit(table: TableGeometry, rule: ReducedSpaceRule, x: PhasePoint,
                  steps: int, cap: int = DEFAULT_CAP, keep_path: bool = False):
    """Iterate first_return ``steps`` times.

    Returns (list of InducedStep, terminating cause or None).  On error the
    completed prefix is returned with the cause name.
    """
    out = []
    cur = x
    for _ in range(steps):
        try:
            st = first_return(table, rule, cur, cap=cap, keep_path=keep_path)
        except (SingularOrbit, NoReturnWithinCap) as e:
            return out, type(e).__name__
        out.append(st)
        cur = st.end
    return out, None


_SIG_HEAD = 17
_SIG_TAIL = 16
_SIGN_DEADBAND = 1e-12


def _seg_tag(is_segment: bool, phi: float) -> int:
    if not is_segment:
        return 0
    if phi > _SIGN_DEADBAND:
        return 3
    if phi < -_SIGN_DEADBAND:
        return 4
    return 0


def signature_of(itinerary: tuple) -> tuple:
    """Canonical itinerary signature of an excursion.

    Long excursions keep head and tail only: the middle of a deep series
    (corridor bounces, cusp dives, arc sliding) is a forced alternation that
    carries no extra class information, and full tuples for 10^5-collision
    dives would dominate memory.
    """
    if len(itinerary) <= _SIG_HEAD + _SIG_TAIL + 1:
        return itinerary
    return itinerary[:_SIG_HEAD] + ("..",) + itinerary[-_SIG_TAIL:]


@dataclass(frozen=True)
class CellIndex:
    n: int        # return time
    j: int        # itinerary-class ordinal within {R = n}, 1-based
    m: int        # derived enumeration m = n0 * (n - 1) + j


class CellRegistry:
    """Online itinerary-signature dictionary for the derived enumeration.

    Signatures are assigned provisional ordinals in first-seen order (stable
    under a fixed seed and index-ordered merging).  ``finalize`` sorts the
    signatures of every return time lexicographically so that the published
    enumeration is canonical regardless of observation order.
    """

    def __init__(self):
        self._sig_j: dict = {}
        self._per_n: dict = {}

    def observe(self, step: InducedStep) -> int:
        """Record the step's signature; returns the provisional ordinal."""
        key = (step.R, step.signature)
        j = self._sig_j.get(key)
        if j is None:
            j = self._per_n.get(step.R, 0) + 1
            self._per_n[step.R] = j
            self._sig_j[key] = j
        return j

    def merge(self, other: "CellRegistry"):
        for (n, sig), _ in sorted(other._sig_j.items(), key=lambda kv: kv[1]):
            key = (n, sig)
            if key not in self._sig_j:
                j = self._per_n.get(n, 0) + 1
                self._per_n[n] = j
                self._sig_j[key] = j

    @property
    def n0(self) -> int:
        """Max observed number of itinerary classes at a single return time."""
        return max(self._per_n.values(), default=0)

    def finalize(self) -> dict:
        """Canonical (n, signature) -> CellIndex mapping, sorted within n."""
        n0 = self.n0
        out = {}
        by_n: dict = {}
        for (n, sig) in self._sig_j:
            by_n.setdefault(n, []).append(sig)
        for n, sigs in by_n.items():
            for j, sig in enumerate(sorted(sigs), start=1):
                out[(n, sig)] = CellIndex(n=n, j=j, m=n0 * (n - 1) + j)
        return out


def cell_index(registry: CellRegistry, step: InducedStep) -> CellIndex:
    """Provisional cell index of a step (j in first-seen order).

    The derived index m uses the registry's current n0 estimate; use
    ``registry.finalize()`` for the canonical enumeration of a finished run.
    """
    j = registry.observe(step)
    n0 = max(registry.n0, 1)
    return CellIndex(n=step.R, j=j, m=n0 * (step.R - 1) + j)


def fd_jacobian_T(table: TableGeometry, rule: ReducedSpaceRule, x: PhasePoint,
                  h: float = 1e-7, cap: int = DEFAULT_CAP):
    """Finite-difference Jacobian of the induced map T at x in M.

    The four stencil points must share the return time and land on one
    component, i.e. lie in the same cell; otherwise SingularNeighborhood.
    """
    step = h
    for _ in range(4):
        try:
            imgs = []
            for dr, dphi in ((step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)):
                st = first_return(table, rule,
                                  PhasePoint(x.component, x.r + dr, x.phi + dphi),
                                  cap=cap)
                imgs.append(st)
        except (SingularOrbit, NoReturnWithinCap, OutOfRange):
            step *= 0.1
            continue
        if len({st.R for st in imgs}) == 1 and \
                len({st.end.component for st in imgs}) == 1:
            ci = imgs[0].end.component
            dr_dr = table.chart_delta_r(ci, imgs[1].end.r, imgs[0].end.r) / (2 * step)
            dphi_dr = (imgs[0].end.phi - imgs[1].end.phi) / (2 * step)
            dr_dphi = table.chart_delta_r(ci, imgs[3].end.r, imgs[2].end.r) / (2 * step)
            dphi_dphi = (imgs[2].end.phi - imgs[3].end.phi) / (2 * step)
            return np.array([[dr_dr, dr_dphi], [dphi_dr, dphi_dphi]])
        step *= 0.1
    raise SingularNeighborhood(
        f"induced-map stencil at {x} straddles a cell boundary")

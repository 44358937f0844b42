"""The billiard collision map F on the phase space M = boundary x [-pi/2, pi/2].

Phase points are (component, arc-length r, reflection angle phi), with phi
measured from the inward normal toward the traversal tangent:

    outgoing direction = cos(phi) * n + sin(phi) * t.

The stepping kernel is written against the flattened component tuples built
by the geometry module and avoids object allocation; a 10^7-collision orbit
on the Sinai table runs in about a minute of pure Python.

Orbits entering the tol_tan neighbourhood of grazing collisions or the
tol_corner neighbourhood of junctions are terminated (NearTangency /
CornerHit) and the sample is discarded by callers; the invariant measure is
insensitive to these measure-zero exclusions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import (CornerHit, NearTangency, NoIntersection, NotIncoming,
                     SingularNeighborhood)
from .geometry import K_ARC, K_FLAT, K_SEGMENT, TWO_PI, TableGeometry

TOL_TAN = 1e-8       # rad; |phi| within this of pi/2 terminates the orbit
TOL_CORNER = 1e-10   # arc length; hits this close to a junction terminate
TAU_MIN = 1e-12      # excludes re-detecting the current collision
FD_STEP = 1e-7       # finite-difference step for Jacobians in (r, phi)

HALF_PI = 0.5 * math.pi


class PhasePoint(NamedTuple):
    component: int
    r: float
    phi: float


@dataclass(frozen=True)
class CollisionRecord:
    """One application of F with flight geometry attached."""

    next: PhasePoint
    tau: float
    seg_start: tuple
    seg_end: tuple
    singularity_distance: float   # min(pi/2 - |phi'|, junction distance)
    near_tangency: bool


def reflect(direction, normal):
    """Specular reflection d - 2(d.n)n; requires an incoming direction."""
    dx, dy = direction
    nx, ny = normal
    dot = dx * nx + dy * ny
    if dot >= 0.0:
        raise NotIncoming(f"direction {direction} does not point into the wall")
    return (dx - 2.0 * dot * nx, dy - 2.0 * dot * ny)


def involution(x: PhasePoint) -> PhasePoint:
    """Time reversal (c, r, phi) -> (c, r, -phi); self-inverse."""
    return PhasePoint(x.component, x.r, -x.phi)


def frame_at(table: TableGeometry, comp: int, r: float):
    """Position, inward normal and tangent of the chart point (comp, r)."""
    pos, n, _ = table.point_normal_curvature(comp, r)
    return pos, n, (n[1], -n[0])


def direction_of(table: TableGeometry, x: PhasePoint):
    """Boundary position and outgoing unit direction of a phase point."""
    pos, n, t = frame_at(table, x.component, x.r)
    c, s = math.cos(x.phi), math.sin(x.phi)
    return pos, (c * n[0] + s * t[0], c * n[1] + s * t[1])


def _raycast(fast, px, py, dx, dy, tau_min=TAU_MIN):
    """Earliest boundary intersection of the ray p + tau*d.

    Returns (comp, tau, r_hit) or None.  r_hit is the arc-length coordinate
    on the hit component.
    """
    best_tau = math.inf
    best = None
    for ci, fc in enumerate(fast):
        kind = fc[0]
        if kind == K_SEGMENT:
            _, ax, ay, ux, uy, L = fc
            den = dx * uy - dy * ux
            if den == 0.0:
                continue
            wx = ax - px
            wy = ay - py
            t = (wx * uy - wy * ux) / den
            if t <= tau_min or t >= best_tau:
                continue
            s = (dy * wx - dx * wy) / den
            if 0.0 <= s <= L:
                best_tau = t
                best = (ci, t, s)
        elif kind == K_ARC:
            _, cx, cy, R, psi0, sigma, span, closed = fc
            mx = px - cx
            my = py - cy
            b = mx * dx + my * dy
            q = mx * mx + my * my - R * R
            disc = b * b - q
            if disc <= 0.0:
                continue
            sq = math.sqrt(disc)
            for t in (-b - sq, -b + sq):
                if t <= tau_min or t >= best_tau:
                    continue
                psi = math.atan2(my + t * dy, mx + t * dx)
                off = (sigma * (psi - psi0)) % TWO_PI
                if closed or off <= span:
                    best_tau = t
                    best = (ci, t, R * off)
                    break
        else:  # flat curve
            flat, L = fc[1], fc[2]
            for t, xi in flat.ray_roots(px, py, dx, dy, tau_min):
                if t >= best_tau:
                    break
                best_tau = t
                best = (ci, t, 0.5 * L + flat.s_of_xi(xi))
                break
    return best


def _step_raw(table: TableGeometry, comp: int, r: float, phi: float):
    """One collision: (comp, r, phi) -> (comp', r', phi', tau, p, p').

    Raises NearTangency / CornerHit / NoIntersection.
    """
    fast = table._fast
    fc = fast[comp]
    kind = fc[0]
    if kind == K_SEGMENT:
        _, ax, ay, ux, uy, L = fc
        px = ax + r * ux
        py = ay + r * uy
        nx, ny = -uy, ux
        tx, ty = ux, uy
    elif kind == K_ARC:
        _, cx, cy, R, psi0, sigma, span, closed = fc
        psi = psi0 + sigma * r / R
        cpsi, spsi = math.cos(psi), math.sin(psi)
        px = cx + R * cpsi
        py = cy + R * spsi
        nx, ny = -sigma * cpsi, -sigma * spsi
        tx, ty = -sigma * spsi, sigma * cpsi
    else:
        flat, L = fc[1], fc[2]
        xi = flat.xi_of_s(r - 0.5 * L)
        px, py = flat.point(xi)
        tx, ty = flat.tangent(xi)
        nx, ny = -ty, tx

    cp, sp = math.cos(phi), math.sin(phi)
    dx = cp * nx + sp * tx
    dy = cp * ny + sp * ty

    hit = _raycast(fast, px, py, dx, dy)
    if hit is None:
        raise NoIntersection(
            f"ray from component {comp} r={r:.6g} phi={phi:.6g} escaped")
    ci, tau, r2 = hit

    fc2 = fast[ci]
    kind2 = fc2[0]
    hx = px + tau * dx
    hy = py + tau * dy
    if kind2 == K_SEGMENT:
        _, ax, ay, ux, uy, L2 = fc2
        n2x, n2y = -uy, ux
        t2x, t2y = ux, uy
        closed2 = False
    elif kind2 == K_ARC:
        _, cx, cy, R, psi0, sigma, span, closed = fc2
        psi = psi0 + sigma * r2 / R
        cpsi, spsi = math.cos(psi), math.sin(psi)
        n2x, n2y = -sigma * cpsi, -sigma * spsi
        t2x, t2y = -sigma * spsi, sigma * cpsi
        L2 = R * span
        closed2 = bool(closed)
    else:
        flat, L2 = fc2[1], fc2[2]
        xi = flat.xi_of_s(r2 - 0.5 * L2)
        t2x, t2y = flat.tangent(xi)
        n2x, n2y = -t2y, t2x
        closed2 = False

    dot_n = dx * n2x + dy * n2y          # = -cos(phi'); must be negative
    dot_t = dx * t2x + dy * t2y
    phi2 = math.atan2(dot_t, -dot_n)
    if HALF_PI - abs(phi2) < TOL_TAN:
        raise NearTangency(
            f"grazing collision on component {ci}, phi'={phi2:.12g}")
    if not closed2 and min(r2, L2 - r2) < TOL_CORNER:
        raise CornerHit(f"hit within tol_corner of a junction on component {ci}")
    return ci, r2, phi2, tau, (px, py), (hx, hy)


def next_collision(table: TableGeometry, position, direction) -> CollisionRecord:
    """Earliest collision of the ray from ``position`` along ``direction``.

    ``position`` may lie on the boundary or strictly inside.  Near-tangential
    arrivals are flagged on the record, not raised.
    """
    px, py = position
    dx, dy = direction
    hit = _raycast(table._fast, px, py, dx, dy)
    if hit is None:
        raise NoIntersection(f"ray from {position} along {direction} escaped")
    ci, tau, r2 = hit
    pos2, n2, t2 = frame_at(table, ci, r2)
    dot_n = dx * n2[0] + dy * n2[1]
    dot_t = dx * t2[0] + dy * t2[1]
    phi2 = math.atan2(dot_t, -dot_n)
    near = HALF_PI - abs(phi2) < TOL_TAN
    comp_obj = table.components[ci]
    if not comp_obj.closed and min(r2, comp_obj.length - r2) < TOL_CORNER:
        raise CornerHit(f"hit within tol_corner of a junction on component {ci}")
    sing = min(HALF_PI - abs(phi2), table.junction_distance(ci, r2))
    hx = px + tau * dx
    hy = py + tau * dy
    return CollisionRecord(next=PhasePoint(ci, r2, phi2), tau=tau,
                           seg_start=(px, py), seg_end=(hx, hy),
                           singularity_distance=sing, near_tangency=near)


def billiard_map(table: TableGeometry, x: PhasePoint):
    """One application of F; returns (next point, free path tau)."""
    if HALF_PI - abs(x.phi) < TOL_TAN:
        raise NearTangency(f"starting point is grazing: phi={x.phi!r}")
    ci, r2, phi2, tau, _, _ = _step_raw(table, x.component, x.r, x.phi)
    return PhasePoint(ci, r2, phi2), tau


def singularity_distance(table: TableGeometry, x: PhasePoint) -> float:
    """Chart-distance proxy to the singularity set S1 of the billiard map.

    Minimum of the tangency gap pi/2 - |phi|, the arc-length distance to the
    nearest junction, and the tangency gap after one forward step (a stand-in
    for the distance to preimages of tangential collisions).  Monotone in the
    true distance near S1; not a metric.
    """
    base = min(HALF_PI - abs(x.phi), table.junction_distance(x.component, x.r))
    try:
        _, _, phi2, _, _, _ = _step_raw(table, x.component, x.r, x.phi)
        fwd = HALF_PI - abs(phi2)
    except (NearTangency, CornerHit, NoIntersection):
        fwd = 0.0
    return min(base, fwd)


def fd_jacobian(table: TableGeometry, x: PhasePoint, h: float = FD_STEP):
    """Central finite-difference Jacobian of F at x in the (r, phi) chart.

    All four perturbed images must land on one component; otherwise the
    stencil straddles a singularity curve and SingularNeighborhood is raised.
    """
    step = h
    for _ in range(4):
        try:
            imgs = []
            for dr, dphi in ((step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)):
                ci, r2, phi2, _, _, _ = _step_raw(
                    table, x.component, x.r + dr, x.phi + dphi)
                imgs.append((ci, r2, phi2))
        except Exception:
            step *= 0.1
            continue
        comps = {im[0] for im in imgs}
        if len(comps) == 1:
            ci = imgs[0][0]
            dr_dr = table.chart_delta_r(ci, imgs[1][1], imgs[0][1]) / (2 * step)
            dphi_dr = (imgs[0][2] - imgs[1][2]) / (2 * step)
            dr_dphi = table.chart_delta_r(ci, imgs[3][1], imgs[2][1]) / (2 * step)
            dphi_dphi = (imgs[2][2] - imgs[3][2]) / (2 * step)
            return np.array([[dr_dr, dr_dphi], [dphi_dr, dphi_dphi]])
        step *= 0.1
    raise SingularNeighborhood(
        f"finite-difference stencil at {x} straddles a singularity")


def expansion_factor(table: TableGeometry, x: PhasePoint, h: float = FD_STEP) -> float:
    """Largest singular value of the finite-difference Jacobian of F at x."""
    return float(np.linalg.svd(fd_jacobian(table, x, h), compute_uv=False)[0])


def orbit_average(table: TableGeometry, x0: PhasePoint, n_steps: int,
                  fns: Sequence[Callable[[int, float, float], float]],
                  n_batches: int = 50,
                  restart: Optional[Callable[[], PhasePoint]] = None):
    """Birkhoff averages of chart observables along one orbit of F.

    ``fns`` receive (component, r, phi) of each collision.  If the orbit is
    terminated by a singularity and ``restart`` is given, a fresh start is
    drawn and accumulation continues; otherwise the orbit ends early.

    Returns (means, batch_means_se, steps_done, discards).
    """
    k = len(fns)
    batch_len = max(1, n_steps // n_batches)
    batch_sums = np.zeros((k, n_batches + 1))
    comp, r, phi = x0.component, x0.r, x0.phi
    done = 0
    discards = 0
    step = _step_raw
    while done < n_steps:
        try:
            comp, r, phi, _, _, _ = step(table, comp, r, phi)
        except (NearTangency, CornerHit, NoIntersection):
            discards += 1
            if restart is None:
                break
            comp, r, phi = restart()
            continue
        b = min(done // batch_len, n_batches)
        for i in range(k):
            batch_sums[i, b] += fns[i](comp, r, phi)
        done += 1
    if done == 0:
        raise SingularOrbitAtStart()
    means = batch_sums.sum(axis=1) / done
    full = [s[:n_batches] / batch_len for s in batch_sums]
    nb_used = max(1, min(n_batches, done // batch_len))
    se = np.array([float(np.std(f[:nb_used], ddof=1) / math.sqrt(nb_used))
                   if nb_used > 1 else math.inf for f in full])
    return means, se, done, discards


class SingularOrbitAtStart(NoIntersection):
    pass


def orbit_points(table: TableGeometry, x0: PhasePoint, n_steps: int):
    """List of (PhasePoint, tau, singularity_distance) rows for an orbit.

    Stops early at a singularity; returns the completed prefix and the
    terminating cause (or None).
    """
    rows = []
    x = x0
    cause = None
    for _ in range(n_steps):
        try:
            tau_x = billiard_map(table, x)
        except (NearTangency, CornerHit, NoIntersection) as e:
            cause = type(e).__name__
            break
        x, tau = tau_x
        rows.append((x, tau, singularity_distance(table, x)))
    return rows, cause

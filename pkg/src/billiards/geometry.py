"""Billiard tables as closed, oriented, piecewise-smooth planar boundaries.

Every component is parametrized by arc length with the billiard domain on
the *left* of the traversal direction, so the inward unit normal is always
the left normal of the unit tangent.  Signed curvature follows the
dispersing-positive convention: kappa = -(dt/ds) . n, which makes obstacle
walls and inward-bulging arcs positive, focusing arcs (stadium) negative,
straight walls zero.

Four families are supported:

* ``semi-dispersing-square``  -- unit-style square with a central circular
  obstacle (Sinai table).
* ``cusp``                    -- curvilinear triangle between three mutually
  tangent dispersing arcs (Machta-style table).
* ``flat-point``              -- two facing dispersing graphs y = |x|^beta
  closed by dispersing side arcs at transversal corners.
* ``stadium``                 -- Bunimovich stadium.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidGeometry, OutOfRange

TWO_PI = 2.0 * math.pi

# component kind codes used by the dynamics hot loop
K_SEGMENT = 0
K_ARC = 1
K_FLAT = 2

_KIND_NAMES = {K_SEGMENT: "segment", K_ARC: "circular-arc", K_FLAT: "flat-curve"}

_GL8_X, _GL8_W = np.polynomial.legendre.leggauss(8)
_GL8 = list(zip(_GL8_X.tolist(), _GL8_W.tolist()))


def _wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, TWO_PI)
    if a > math.pi:
        a -= TWO_PI
    elif a <= -math.pi:
        a += TWO_PI
    return a


class FlatCurve:
    """Local graph eta = |xi|^beta over xi in [-w, w] in an oriented frame.

    The curve point at parameter xi is ``origin + xi*e1 + |xi|^beta * e2``.
    Arc length is cached on a dense Gauss-Legendre table; the inverse is
    an interpolation refined by Newton steps (1e-12 accuracy or better).
    """

    def __init__(self, origin, e1, e2, beta, halfwidth, n_cells=4096):
        if beta <= 2.0:
            raise InvalidGeometry(f"flatness exponent must exceed 2, got {beta}")
        self.origin = (float(origin[0]), float(origin[1]))
        self.e1 = (float(e1[0]), float(e1[1]))
        self.e2 = (float(e2[0]), float(e2[1]))
        self.beta = float(beta)
        self.w = float(halfwidth)
        self._build_length_table(n_cells)

    # -- graph and derivatives -------------------------------------------
    def g(self, xi: float) -> float:
        return abs(xi) ** self.beta

    def gp(self, xi: float) -> float:
        if xi == 0.0:
            return 0.0
        return self.beta * abs(xi) ** (self.beta - 1.0) * (1.0 if xi > 0 else -1.0)

    def gpp(self, xi: float) -> float:
        if xi == 0.0:
            return 0.0
        return self.beta * (self.beta - 1.0) * abs(xi) ** (self.beta - 2.0)

    def _speed(self, xi):
        return np.sqrt(1.0 + (self.beta * np.abs(xi) ** (self.beta - 1.0)) ** 2)

    def _speed1(self, xi: float) -> float:
        gp = self.beta * abs(xi) ** (self.beta - 1.0)
        return math.sqrt(1.0 + gp * gp)

    def _build_length_table(self, n_cells):
        nodes, weights = _GL8_X, _GL8_W
        edges = np.linspace(0.0, self.w, n_cells + 1)
        mids = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1:] - edges[:-1])
        pts = mids[:, None] + half[:, None] * nodes[None, :]
        cell = (half[:, None] * weights[None, :] * self._speed(pts)).sum(axis=1)
        cum = np.concatenate([[0.0], np.cumsum(cell)])
        self._xi_grid = edges.tolist()
        self._s_grid = cum.tolist()
        self._dx = float(edges[1] - edges[0])
        self.half_length = float(cum[-1])

    def s_of_xi(self, xi: float) -> float:
        """Signed arc length from the flat point (odd in xi)."""
        a = abs(xi)
        # exact-grid value plus one Gauss cell from the nearest node below
        i = int(a / self._dx)
        i = min(max(i, 0), len(self._xi_grid) - 2)
        s = self._s_grid[i] + self._quad(self._xi_grid[i], a)
        return s if xi >= 0 else -s

    def _quad(self, a, b):
        if b == a:
            return 0.0
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        speed = self._speed1
        total = 0.0
        for x, wt in _GL8:
            total += wt * speed(mid + half * x)
        return half * total

    def xi_of_s(self, s: float) -> float:
        """Inverse arc length, |error| < 1e-12."""
        sign = 1.0 if s >= 0 else -1.0
        sa = abs(s)
        if sa >= self.half_length:
            return sign * self.w
        # bracketing grid cell by bisection, then Newton
        grid = self._s_grid
        lo, hi = 0, len(grid) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if grid[mid] <= sa:
                lo = mid
            else:
                hi = mid
        f = (sa - grid[lo]) / (grid[hi] - grid[lo])
        xi = self._xi_grid[lo] + f * self._dx
        for _ in range(3):
            xi -= (self.s_of_xi(xi) - sa) / self._speed1(xi)
            if xi < 0.0:
                xi = 0.0
            elif xi > self.w:
                xi = self.w
        return sign * xi

    # -- embedding --------------------------------------------------------
    def point(self, xi: float):
        ox, oy = self.origin
        e1x, e1y = self.e1
        e2x, e2y = self.e2
        g = self.g(xi)
        return (ox + xi * e1x + g * e2x, oy + xi * e1y + g * e2y)

    def tangent(self, xi: float):
        e1x, e1y = self.e1
        e2x, e2y = self.e2
        gp = self.gp(xi)
        inv = 1.0 / math.sqrt(1.0 + gp * gp)
        return ((e1x + gp * e2x) * inv, (e1y + gp * e2y) * inv)

    def curvature_mag(self, xi: float) -> float:
        gp = self.gp(xi)
        return self.gpp(xi) / (1.0 + gp * gp) ** 1.5

    def to_local(self, px, py):
        vx = px - self.origin[0]
        vy = py - self.origin[1]
        return (vx * self.e1[0] + vy * self.e1[1], vx * self.e2[0] + vy * self.e2[1])

    def ray_roots(self, px, py, dx, dy, tau_min, tau_tol=1e-12, max_bisect=200):
        """All ray parameters tau > tau_min where the ray meets the graph.

        Exploits convexity of |xi|^beta: h(tau) = eta(tau) - g(xi(tau)) is
        concave along the ray, so there are at most two roots, bracketed on
        either side of the single maximum of h.
        """
        xi0, eta0 = self.to_local(px, py)
        dxi = dx * self.e1[0] + dy * self.e1[1]
        deta = dx * self.e2[0] + dy * self.e2[1]
        w = self.w
        g_w = self.g(w)

        if abs(dxi) < 1e-15:
            if abs(xi0) > w:
                return []
            # eta affine in tau, single candidate
            if abs(deta) < 1e-15:
                return []
            t = (self.g(xi0) - eta0) / deta
            return [(t, xi0)] if t > tau_min else []

        t_a = (-w - xi0) / dxi
        t_b = (w - xi0) / dxi
        lo, hi = (t_a, t_b) if t_a < t_b else (t_b, t_a)
        lo = max(lo, tau_min)
        # clip to the eta range [0, g(w)] of the curve
        if abs(deta) > 1e-15:
            t_c = (0.0 - eta0) / deta
            t_d = (g_w - eta0) / deta
            elo, ehi = (t_c, t_d) if t_c < t_d else (t_d, t_c)
            if elo > lo:
                lo = elo
            if ehi < hi:
                hi = ehi
        elif not (0.0 <= eta0 <= g_w):
            return []
        if hi <= lo:
            return []

        g = self.g
        gp = self.gp
        gpp = self.gpp

        def h(t):
            return eta0 + t * deta - g(xi0 + t * dxi)

        def hp(t):
            return deta - gp(xi0 + t * dxi) * dxi

        # locate the maximum of the concave h: hp is monotone decreasing,
        # solved by Newton (hpp available) safeguarded by bisection
        hp_lo = hp(lo)
        if hp_lo <= 0.0:
            t_pk = lo
        else:
            hp_hi = hp(hi)
            if hp_hi >= 0.0:
                t_pk = hi
            else:
                a, b = lo, hi
                t = 0.5 * (a + b)
                for _ in range(max_bisect):
                    v = hp(t)
                    if v > 0.0:
                        a = t
                    else:
                        b = t
                    if b - a < tau_tol:
                        break
                    d2 = -gpp(xi0 + t * dxi) * dxi * dxi
                    if d2 != 0.0:
                        tn = t - v / d2
                        if a < tn < b:
                            t = tn
                            continue
                    t = 0.5 * (a + b)
                t_pk = 0.5 * (a + b)

        roots = []
        for a, b in ((lo, t_pk), (t_pk, hi)):
            if b <= a:
                continue
            ha, hb = h(a), h(b)
            if ha == 0.0:
                roots.append(a)
                continue
            if ha * hb > 0.0:
                continue
            t = self._bracketed_root(h, hp, a, b, tau_tol, max_bisect)
            roots.append(t)
        out = []
        for t in roots:
            if t > tau_min:
                xi = xi0 + t * dxi
                if abs(xi) <= w:
                    out.append((t, xi))
        out.sort()
        return out

    @staticmethod
    def _bracketed_root(h, hp, a, b, tol, max_iter):
        ha = h(a)
        t = 0.5 * (a + b)
        for _ in range(max_iter):
            ht = h(t)
            if ht == 0.0:
                return t
            if (ht > 0.0) == (ha > 0.0):
                a = t
            else:
                b = t
            if b - a < tol:
                return 0.5 * (a + b)
            d = hp(t)
            if d != 0.0:
                tn = t - ht / d
                if a < tn < b:
                    t = tn
                    continue
            t = 0.5 * (a + b)
        return 0.5 * (a + b)


@dataclass(frozen=True)
class BoundaryComponent:
    """One oriented smooth piece of the table boundary."""

    index: int
    kind: str                 # segment | circular-arc | flat-curve
    curvature_class: str      # dispersing | focusing | neutral | flat-point
    length: float
    closed: bool = False
    # segment data
    a: Optional[tuple] = None
    b: Optional[tuple] = None
    u: Optional[tuple] = None
    # arc data
    center: Optional[tuple] = None
    radius: Optional[float] = None
    psi0: Optional[float] = None
    sigma: Optional[float] = None   # +1 ccw, -1 cw traversal
    sweep: Optional[float] = None   # signed angular extent
    # flat-curve data
    flat: Optional[FlatCurve] = None

    def point_normal_curvature(self, r: float):
        """Position, inward unit normal and signed curvature at arc length r."""
        if r < 0.0 or r > self.length:
            raise OutOfRange(
                f"r={r} outside [0, {self.length}) on component {self.index}")
        if self.kind == "segment":
            ax, ay = self.a
            ux, uy = self.u
            pos = (ax + r * ux, ay + r * uy)
            return pos, (-uy, ux), 0.0
        if self.kind == "circular-arc":
            psi = self.psi0 + self.sigma * r / self.radius
            c, s = math.cos(psi), math.sin(psi)
            pos = (self.center[0] + self.radius * c, self.center[1] + self.radius * s)
            n = (-self.sigma * c, -self.sigma * s)
            return pos, n, -self.sigma / self.radius
        # flat curve
        xi = self.flat.xi_of_s(r - 0.5 * self.length)
        pos = self.flat.point(xi)
        tx, ty = self.flat.tangent(xi)
        n = (-ty, tx)
        # graph bends toward +e2; sign of kappa = -(dt/ds).n worked out from frame
        kap = self.flat.curvature_mag(xi)
        e2x, e2y = self.flat.e2
        bend_along_n = e2x * n[0] + e2y * n[1]
        return pos, n, -kap * (1.0 if bend_along_n > 0 else -1.0)

    def tangent(self, r: float):
        _, n, _ = self.point_normal_curvature(r)
        return (n[1], -n[0])


@dataclass(frozen=True)
class TableSpec:
    """Parameters selecting one table from the supported families."""

    family: str
    a: float = 1.0                     # square side
    rho: float = 0.25                  # obstacle radius
    radius: float = 1.0                # stadium semicircle radius
    length: float = 2.0                # stadium straight-wall length
    radii: tuple = (1.0, 1.0, 1.0)     # cusp arc radii
    beta: float = 4.0                  # flatness exponent
    halfwidth: float = 0.5             # flat-graph half width
    gap: float = 1.0                   # vertical gap between flat points
    arc_offset: float = 3.0            # side-arc center offset, units of corner height

    def key(self):
        return (self.family, self.a, self.rho, self.radius, self.length,
                tuple(self.radii), self.beta, self.halfwidth, self.gap,
                self.arc_offset)


@dataclass(frozen=True)
class Junction:
    position: tuple
    comp_end: int
    comp_start: int
    turn: float          # exterior turning angle of the directed tangent
    kind: str            # smooth | corner | tangential

    @staticmethod
    def classify(turn: float, tol: float = 1e-9) -> str:
        if abs(turn) < tol:
            return "smooth"
        if abs(abs(turn) - math.pi) < tol:
            return "tangential"
        return "corner"


class TableGeometry:
    """Validated, immutable table: ordered components, junctions, charts."""

    def __init__(self, spec: TableSpec, components: Sequence[BoundaryComponent],
                 loops: Sequence[Sequence[int]], contains: Callable[[float, float], bool],
                 default_rule: str):
        self.spec = spec
        self.components = list(components)
        self.loops = [list(l) for l in loops]
        self.contains = contains
        self.default_rule = default_rule
        self.total_length = sum(c.length for c in components)
        self._offsets = []
        acc = 0.0
        for c in components:
            self._offsets.append(acc)
            acc += c.length
        self._offsets_arr = np.array(self._offsets + [acc])
        self.junctions = self._build_junctions()
        self._junction_r = self._junction_positions_by_component()
        self._fast = self._build_fast()
        self._is_segment = [c.kind == "segment" for c in components]
        self._validate()

    # ------------------------------------------------------------------
    def _build_junctions(self):
        out = []
        for loop in self.loops:
            if len(loop) == 1 and self.components[loop[0]].closed:
                continue
            for k, i in enumerate(loop):
                j = loop[(k + 1) % len(loop)]
                ci, cj = self.components[i], self.components[j]
                p_end, n_end, _ = ci.point_normal_curvature(ci.length)
                p_start, n_start, _ = cj.point_normal_curvature(0.0)
                t_end = (n_end[1], -n_end[0])
                t_start = (n_start[1], -n_start[0])
                turn = _wrap_angle(math.atan2(t_start[1], t_start[0])
                                   - math.atan2(t_end[1], t_end[0]))
                out.append(Junction(position=p_start, comp_end=i, comp_start=j,
                                    turn=turn, kind=Junction.classify(turn, 1e-7)))
        return out

    def _junction_positions_by_component(self):
        """Arc-length positions of junctions on each component (its endpoints)."""
        table = {}
        for c in self.components:
            if c.closed:
                table[c.index] = ()
            else:
                table[c.index] = (0.0, c.length)
        return table

    def _build_fast(self):
        fast = []
        for c in self.components:
            if c.kind == "segment":
                fast.append((K_SEGMENT, c.a[0], c.a[1], c.u[0], c.u[1], c.length))
            elif c.kind == "circular-arc":
                fast.append((K_ARC, c.center[0], c.center[1], c.radius, c.psi0,
                             c.sigma, abs(c.sweep), 1.0 if c.closed else 0.0))
            else:
                fast.append((K_FLAT, c.flat, c.length))
        return fast

    def _validate(self):
        # components chain head-to-tail within each loop
        for loop in self.loops:
            for k, i in enumerate(loop):
                j = loop[(k + 1) % len(loop)]
                ci, cj = self.components[i], self.components[j]
                if ci.closed:
                    continue
                pe, _, _ = ci.point_normal_curvature(ci.length * (1 - 1e-14))
                # evaluate true endpoint by extrapolation from the parametrization
                pe = self._endpoint(ci)
                ps, _, _ = cj.point_normal_curvature(0.0)
                gap = math.hypot(pe[0] - ps[0], pe[1] - ps[1])
                if gap > 1e-9:
                    raise InvalidGeometry(
                        f"components {i}->{j} do not chain (gap {gap:.2e})")
        # winding numbers: +1 for outer loops, -1 for obstacle loops
        for loop in self.loops:
            w = self._winding(loop)
            expected = -1 if self._is_obstacle_loop(loop) else 1
            if w != expected:
                raise InvalidGeometry(
                    f"loop {loop} has winding {w}, expected {expected}")
        # inward normals actually point into the domain
        for c in self.components:
            for frac in (0.23, 0.5, 0.77):
                r = frac * c.length
                pos, n, _ = c.point_normal_curvature(r)
                eps = 1e-7 * max(1.0, self.total_length)
                if not self.contains(pos[0] + eps * n[0], pos[1] + eps * n[1]):
                    raise InvalidGeometry(
                        f"inward normal of component {c.index} points outside")

    @staticmethod
    def _endpoint(c: BoundaryComponent):
        if c.kind == "segment":
            return c.b
        if c.kind == "circular-arc":
            psi = c.psi0 + c.sweep
            return (c.center[0] + c.radius * math.cos(psi),
                    c.center[1] + c.radius * math.sin(psi))
        xi = c.flat.xi_of_s(0.5 * c.length)
        return c.flat.point(xi)

    def _is_obstacle_loop(self, loop):
        # single closed dispersing circle = interior obstacle
        if len(loop) == 1 and self.components[loop[0]].closed:
            return True
        return False

    def _winding(self, loop):
        total = 0.0
        for k, i in enumerate(loop):
            c = self.components[i]
            if c.kind == "circular-arc":
                total += c.sweep
            elif c.kind == "flat-curve":
                # heading change along the traversal (|change| < pi always)
                t0 = c.tangent(0.0)
                t1 = c.tangent(c.length)
                total += _wrap_angle(math.atan2(t1[1], t1[0])
                                     - math.atan2(t0[1], t0[0]))
            if not c.closed:
                j = loop[(k + 1) % len(loop)]
                for jn in self.junctions:
                    if jn.comp_end == i and jn.comp_start == j:
                        total += jn.turn
                        break
        return int(round(total / TWO_PI))

    # -- charts ---------------------------------------------------------
    def global_r(self, comp: int, r: float) -> float:
        return self._offsets[comp] + r

    def locate(self, global_r: float):
        g = global_r % self.total_length
        i = int(np.searchsorted(self._offsets_arr, g, side="right")) - 1
        i = min(max(i, 0), len(self.components) - 1)
        return i, g - self._offsets[i]

    def junction_distance(self, comp: int, r: float) -> float:
        js = self._junction_r[comp]
        if not js:
            return math.inf
        return min(abs(r - j) for j in js)

    def chart_delta_r(self, comp: int, r1: float, r2: float) -> float:
        """Arc-length difference respecting wrap-around on closed components."""
        d = r2 - r1
        if self.components[comp].closed:
            L = self.components[comp].length
            d = (d + 0.5 * L) % L - 0.5 * L
        return d

    def point_normal_curvature(self, comp: int, r: float):
        if not (0 <= comp < len(self.components)):
            raise OutOfRange(f"no component {comp}")
        return self.components[comp].point_normal_curvature(r)

    def describe(self):
        """JSON-friendly component and junction tables."""
        comps = []
        for c in self.components:
            comps.append({
                "index": c.index, "kind": c.kind, "class": c.curvature_class,
                "length": c.length, "closed": c.closed,
            })
        juncs = [{
            "position": list(j.position), "comp_end": j.comp_end,
            "comp_start": j.comp_start, "turn": j.turn, "kind": j.kind,
        } for j in self.junctions]
        return {
            "family": self.spec.family,
            "total_length": self.total_length,
            "components": comps,
            "junctions": juncs,
            "default_rule": self.default_rule,
        }


# ---------------------------------------------------------------------------
# family builders


def _segment(idx, p, q, klass="neutral"):
    L = math.hypot(q[0] - p[0], q[1] - p[1])
    u = ((q[0] - p[0]) / L, (q[1] - p[1]) / L)
    return BoundaryComponent(index=idx, kind="segment", curvature_class=klass,
                             length=L, a=tuple(p), b=tuple(q), u=u)


def _arc(idx, center, radius, psi0, sweep, klass, closed=False):
    return BoundaryComponent(index=idx, kind="circular-arc", curvature_class=klass,
                             length=radius * abs(sweep), closed=closed,
                             center=tuple(center), radius=float(radius),
                             psi0=float(psi0), sigma=math.copysign(1.0, sweep),
                             sweep=float(sweep))


def _build_sinai(spec: TableSpec) -> TableGeometry:
    a, rho = spec.a, spec.rho
    if a <= 0:
        raise InvalidGeometry(f"square side must be positive, got {a}")
    if not (0 < rho < a / 2):
        raise InvalidGeometry(
            f"obstacle radius must satisfy 0 < rho < a/2, got rho={rho}, a={a}")
    cx = cy = a / 2
    comps = [
        _segment(0, (0, 0), (a, 0)),
        _segment(1, (a, 0), (a, a)),
        _segment(2, (a, a), (0, a)),
        _segment(3, (0, a), (0, 0)),
        _arc(4, (cx, cy), rho, 0.0, -TWO_PI, "dispersing", closed=True),
    ]

    def contains(x, y):
        return (0 < x < a and 0 < y < a
                and (x - cx) ** 2 + (y - cy) ** 2 > rho * rho)

    return TableGeometry(spec, comps, [[0, 1, 2, 3], [4]], contains,
                         default_rule="obstacle-collisions")


def _build_stadium(spec: TableSpec) -> TableGeometry:
    rho, L = spec.radius, spec.length
    if rho <= 0 or L <= 0:
        raise InvalidGeometry(
            f"stadium needs radius > 0 and length > 0, got {rho}, {L}")
    hx = L / 2
    comps = [
        _segment(0, (-hx, -rho), (hx, -rho)),
        _arc(1, (hx, 0.0), rho, -math.pi / 2, math.pi, "focusing"),
        _segment(2, (hx, rho), (-hx, rho)),
        _arc(3, (-hx, 0.0), rho, math.pi / 2, math.pi, "focusing"),
    ]

    def contains(x, y):
        if -hx <= x <= hx:
            return -rho < y < rho
        if x > hx:
            return (x - hx) ** 2 + y * y < rho * rho
        return (x + hx) ** 2 + y * y < rho * rho

    return TableGeometry(spec, comps, [[0, 1, 2, 3]], contains,
                         default_rule="arc-first-collisions")


def _build_cusp(spec: TableSpec) -> TableGeometry:
    r1, r2, r3 = spec.radii
    if min(r1, r2, r3) <= 0:
        raise InvalidGeometry(f"cusp radii must be positive, got {spec.radii}")
    A = (0.0, 0.0)
    dab = r1 + r2
    B = (dab, 0.0)
    dac, dbc = r1 + r3, r2 + r3
    cx = (dac * dac - dbc * dbc + dab * dab) / (2 * dab)
    cy2 = dac * dac - cx * cx
    if cy2 <= 0:
        raise InvalidGeometry("cusp circle centers are collinear")
    C = (cx, math.sqrt(cy2))

    def tangency(p, q, rp):
        d = math.hypot(q[0] - p[0], q[1] - p[1])
        return (p[0] + rp * (q[0] - p[0]) / d, p[1] + rp * (q[1] - p[1]) / d)

    t_ab = tangency(A, B, r1)
    t_bc = tangency(B, C, r2)
    t_ca = tangency(C, A, r3)

    def cw_arc(idx, center, radius, p_from, p_to):
        ps = math.atan2(p_from[1] - center[1], p_from[0] - center[0])
        pe = math.atan2(p_to[1] - center[1], p_to[0] - center[0])
        sweep = -(((ps - pe) % TWO_PI) or TWO_PI)
        return _arc(idx, center, radius, ps, sweep, "dispersing")

    comps = [
        cw_arc(0, B, r2, t_ab, t_bc),
        cw_arc(1, C, r3, t_bc, t_ca),
        cw_arc(2, A, r1, t_ca, t_ab),
    ]

    centers = (A, B, C)
    radii = (r1, r2, r3)

    def contains(x, y):
        # inside the triangle of centers and outside all three discs
        for (px, py), (qx, qy) in ((A, B), (B, C), (C, A)):
            if (qx - px) * (y - py) - (qy - py) * (x - px) < 0:
                return False
        for (ox, oy), rr in zip(centers, radii):
            if (x - ox) ** 2 + (y - oy) ** 2 <= rr * rr:
                return False
        return True

    return TableGeometry(spec, comps, [[0, 1, 2]], contains,
                         default_rule="cusp-exterior")


def _build_flat(spec: TableSpec) -> TableGeometry:
    beta, w, gap, off = spec.beta, spec.halfwidth, spec.gap, spec.arc_offset
    if beta <= 2:
        raise InvalidGeometry(f"flatness exponent must exceed 2, got {beta}")
    if w <= 0 or gap <= 0 or off <= 0:
        raise InvalidGeometry(
            f"flat-point table needs positive halfwidth/gap/arc_offset, got "
            f"{w}, {gap}, {off}")
    h = gap / 2 + w ** beta            # corner height
    xc = w + off * h                   # side-arc center offset
    r_side = math.hypot(xc - w, h)
    if xc <= r_side:
        raise InvalidGeometry("side arcs overlap; increase halfwidth or arc_offset")

    floor = FlatCurve(origin=(0.0, -gap / 2), e1=(1.0, 0.0), e2=(0.0, -1.0),
                      beta=beta, halfwidth=w)
    ceil = FlatCurve(origin=(0.0, gap / 2), e1=(-1.0, 0.0), e2=(0.0, 1.0),
                     beta=beta, halfwidth=w)

    def flat_comp(idx, fc):
        return BoundaryComponent(index=idx, kind="flat-curve",
                                 curvature_class="flat-point",
                                 length=2.0 * fc.half_length, flat=fc)

    # right arc runs clockwise from the bottom corner through the leftmost
    # point of its circle (the inward bulge) up to the top corner; the left
    # arc is its mirror image, clockwise from the top-left corner down.
    alpha = math.atan2(h, xc - w)
    psi_b = math.atan2(-h, w - xc)       # = alpha - pi
    comps = [
        flat_comp(0, floor),
        _arc(1, (xc, 0.0), r_side, psi_b, -2.0 * alpha, "dispersing"),
        flat_comp(2, ceil),
        _arc(3, (-xc, 0.0), r_side, alpha, -2.0 * alpha, "dispersing"),
    ]

    def contains(x, y):
        if abs(x) > w:
            return False
        if abs(y) >= gap / 2 + abs(x) ** beta:
            return False
        if (x - xc) ** 2 + y * y <= r_side * r_side:
            return False
        if (x + xc) ** 2 + y * y <= r_side * r_side:
            return False
        return True

    return TableGeometry(spec, comps, [[0, 1, 2, 3]], contains,
                         default_rule="flat-exterior")


_BUILDERS = {
    "semi-dispersing-square": _build_sinai,
    "cusp": _build_cusp,
    "flat-point": _build_flat,
    "stadium": _build_stadium,
}

FAMILIES = tuple(_BUILDERS)


def build_table(spec: TableSpec) -> TableGeometry:
    """Construct and validate the table described by ``spec``."""
    if spec.family not in _BUILDERS:
        raise InvalidGeometry(
            f"unknown family {spec.family!r}; expected one of {FAMILIES}")
    return _BUILDERS[spec.family](spec)


def point_normal_curvature(table: TableGeometry, comp: int, r: float):
    """Position, inward unit normal and signed curvature on a component."""
    return table.point_normal_curvature(comp, r)

"""Numerical probes of the structural hypotheses behind exponential mixing.

Everything here is a proxy: unstable directions come from finite-difference
Jacobians of the induced map, curve lengths are measured in the (r, phi)
chart, and the expansion constant is a low percentile of sampled expansion
factors.  None of these quantities verifies a theorem; they regress its
computable shadow, and outputs are labelled accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dynamics import PhasePoint, expansion_factor, singularity_distance
from .errors import (DivergentProxy, NoReturnWithinCap, OutOfRange,
                     SingularNeighborhood, SingularOrbit, WindowTooSmall)
from .geometry import TableGeometry
from .induced import (DEFAULT_CAP, ReducedSpaceRule, fd_jacobian_T,
                      first_return, first_return_backward, in_reduced_space)
from .stats import (CellStats, PowerLawFit, fit_power_law,
                    _log_uniform_subsample, sample_reduced, sample_rng)

CUT_ANGLE = 0.5          # rad; image chord direction jump that declares a cut
MIN_CURVE_POINTS = 3


@dataclass
class CutPiece:
    src_len: float        # |T^{-1} V_alpha|
    img_len: float        # |V_alpha|
    end_component: int
    R: int


@dataclass
class UnstableCurveSample:
    """Polyline along the empirical unstable direction, with its image cuts."""

    center: PhasePoint
    delta: float
    component: int
    points: List[PhasePoint]
    images: List[PhasePoint]
    image_R: List[int]
    chart_length: float               # |W|
    pieces: List[CutPiece]
    lost_src: float                   # source length dropped at failed points

    @property
    def covered_src(self) -> float:
        return sum(p.src_len for p in self.pieces)


def _unstable_direction(table, rule, x, cap):
    J = fd_jacobian_T(table, rule, x, cap=cap)
    _, _, vt = np.linalg.svd(J)
    v = vt[0]
    return v / np.linalg.norm(v)


def grow_unstable_curve(table: TableGeometry, rule: ReducedSpaceRule,
                        x: PhasePoint, delta: float, npts: int = 33,
                        cap: int = DEFAULT_CAP) -> UnstableCurveSample:
    """Polyline of chart length <= delta through x along the unstable field.

    The direction is re-estimated at every node (dominant right singular
    vector of the finite-difference Jacobian of T), so the polyline follows
    the cone field rather than a straight chart line.  Growth on a side
    stops at cell boundaries; fewer than 3 surviving nodes raises
    SingularNeighborhood.
    """
    h = delta / (npts - 1)
    comp_len = table.components[x.component].length
    closed = table.components[x.component].closed

    def advance(cur, direction):
        r2 = cur.r + h * direction[0]
        phi2 = cur.phi + h * direction[1]
        if closed:
            r2 %= comp_len
        elif not (0.0 <= r2 < comp_len):
            return None
        if abs(phi2) >= 0.5 * math.pi:
            return None
        cand = PhasePoint(x.component, r2, phi2)
        try:
            if not in_reduced_space(table, rule, cand):
                return None
        except Exception:
            return None
        return cand

    try:
        v0 = _unstable_direction(table, rule, x, cap)
    except (SingularNeighborhood, SingularOrbit, NoReturnWithinCap) as e:
        raise SingularNeighborhood(f"no unstable direction at {x}") from e

    half = (npts - 1) // 2
    sides = []
    for sgn in (-1.0, 1.0):
        pts = []
        cur = x
        d_prev = sgn * v0
        for _ in range(half):
            nxt = advance(cur, d_prev)
            if nxt is None:
                break
            pts.append(nxt)
            cur = nxt
            try:
                v = _unstable_direction(table, rule, cur, cap)
            except (SingularNeighborhood, SingularOrbit, NoReturnWithinCap):
                break
            if v[0] * d_prev[0] + v[1] * d_prev[1] < 0:
                v = -v
            d_prev = v
        sides.append(pts)
    points = list(reversed(sides[0])) + [x] + sides[1]
    if len(points) < MIN_CURVE_POINTS:
        raise SingularNeighborhood(
            f"curve through {x} cut before reaching {MIN_CURVE_POINTS} points")

    images: List[Optional[PhasePoint]] = []
    image_R: List[int] = []
    steps = []
    for p in points:
        try:
            st = first_return(table, rule, p, cap=cap)
            images.append(st.end)
            image_R.append(st.R)
            steps.append(st)
        except (SingularOrbit, NoReturnWithinCap):
            images.append(None)
            image_R.append(-1)
            steps.append(None)

    return _assemble_sample(table, rule, x, delta, points, images, image_R,
                            cap)


def _chart_dist(table, comp, a: PhasePoint, b: PhasePoint) -> float:
    dr = table.chart_delta_r(comp, a.r, b.r)
    return math.hypot(dr, b.phi - a.phi)


def _assemble_sample(table, rule, x, delta, points, images, image_R, cap):
    comp = x.component
    n = len(points)
    src_seg = [_chart_dist(table, comp, points[i], points[i + 1])
               for i in range(n - 1)]
    s_pos = [0.0]
    for seg in src_seg:
        s_pos.append(s_pos[-1] + seg)
    chart_length = s_pos[-1]

    def img_dir(i, k):
        a, b = images[i], images[k]
        dr = table.chart_delta_r(a.component, a.r, b.r)
        return math.atan2(b.phi - a.phi, dr)

    # maximal runs of image points on one smooth branch
    groups = []      # (i, k) inclusive index ranges
    i = 0
    while i < n:
        if images[i] is None:
            i += 1
            continue
        k = i
        prev_dir = None
        while k + 1 < n and images[k + 1] is not None \
                and images[k + 1].component == images[i].component \
                and image_R[k + 1] == image_R[i]:
            d = img_dir(k, k + 1)
            if prev_dir is not None:
                jump = abs(d - prev_dir)
                jump = min(jump, 2 * math.pi - jump)
                if jump > CUT_ANGLE:
                    break
            prev_dir = d
            k += 1
        groups.append((i, k))
        i = k + 1

    # boundaries: one shared position per junction so source lengths
    # partition |W| exactly; refinement bisects on the left piece's branch
    bounds = {}      # group index -> (left s, right s)
    for gi, (i, k) in enumerate(groups):
        if i == 0:
            left = 0.0
        elif images[i - 1] is None:
            left = s_pos[i] - 0.5 * src_seg[i - 1]
        else:
            pi, pk = groups[gi - 1]
            frac = _refine_cut(table, rule, points[i - 1], points[i],
                               images[pk].component, image_R[pk], cap)
            left = s_pos[i - 1] + frac * src_seg[i - 1]
        if k == n - 1:
            right = s_pos[k]
        elif images[k + 1] is None:
            right = s_pos[k] + 0.5 * src_seg[k]
        else:
            right = None     # refined when the next group claims its left edge
        bounds[gi] = [left, right]
    for gi in range(len(groups) - 1):
        if bounds[gi][1] is None:
            bounds[gi][1] = bounds[gi + 1][0]
    if groups and bounds[len(groups) - 1][1] is None:
        bounds[len(groups) - 1][1] = s_pos[groups[-1][1]]

    def local_rate(i, k):
        """Image stretch per unit source length near the group."""
        if k > i:
            num = sum(_chart_dist(table, images[i].component, images[j],
                                  images[j + 1]) for j in range(i, k))
            den = s_pos[k] - s_pos[i]
            if den > 0 and num > 0:
                return num / den
        try:
            J = fd_jacobian_T(table, rule, points[i], cap=cap)
            return float(np.linalg.svd(J, compute_uv=False)[0])
        except Exception:
            return 1.0       # conservative: no contraction assumed

    pieces: List[CutPiece] = []
    covered = 0.0
    for gi, (i, k) in enumerate(groups):
        left, right = bounds[gi]
        src_len = max(right - left, 0.0)
        if src_len == 0.0:
            continue
        covered += src_len
        interior = sum(_chart_dist(table, images[i].component, images[j],
                                   images[j + 1]) for j in range(i, k))
        rate = local_rate(i, k)
        stub = max(s_pos[i] - left, 0.0) + max(right - s_pos[k], 0.0)
        img_len = interior + stub * rate
        pieces.append(CutPiece(src_len=src_len, img_len=img_len,
                               end_component=images[i].component,
                               R=image_R[i]))

    return UnstableCurveSample(center=x, delta=delta, component=comp,
                               points=points, images=list(images),
                               image_R=image_R, chart_length=chart_length,
                               pieces=pieces,
                               lost_src=max(chart_length - covered, 0.0))


def _refine_cut(table, rule, p_left, p_right, want_comp, want_R, cap,
                iters: int = 20):
    """Fraction of [p_left, p_right] whose image matches (want_comp, want_R).

    Bisection from the right endpoint toward the left; returns the cut
    position as a fraction in [0, 1] measured from p_left.
    """
    comp = p_left.component
    L = table.components[comp].length
    closed = table.components[comp].closed
    dr = table.chart_delta_r(comp, p_left.r, p_right.r)
    dphi = p_right.phi - p_left.phi

    def matches(t):
        r = p_left.r + t * dr
        if closed:
            r %= L
        elif not (0.0 <= r < L):
            return False
        try:
            st = first_return(table, rule,
                              PhasePoint(comp, r, p_left.phi + t * dphi),
                              cap=cap)
        except (SingularOrbit, NoReturnWithinCap):
            return False
        return st.end.component == want_comp and st.R == want_R

    lo, hi = 0.0, 1.0       # matches(hi-side) is the piece, lo-side is not
    # orient: we search for the boundary of the region matching the piece
    if matches(0.0):
        return 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if matches(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def one_step_expansion_sum(sample: UnstableCurveSample, s0: float = 1.0) -> float:
    """The one-step expansion sum over the cut pieces of one curve:

        sum_alpha (|W| / |V_alpha|)^s0 * |T^{-1} V_alpha| / |W|

    Values below 1 indicate that singularity cutting cannot defeat the
    expansion in one iterate.
    """
    W = sample.chart_length
    if W <= 0:
        raise ValueError("degenerate curve")
    total = 0.0
    for p in sample.pieces:
        if p.img_len <= 0:
            continue
        total += (W / p.img_len) ** s0 * (p.src_len / W)
    return total


def induced_singularity_distance(table: TableGeometry, rule: ReducedSpaceRule,
                                 x: PhasePoint, cap: int = DEFAULT_CAP) -> float:
    """Chart-proxy distance from x in M to the singularity set of T.

    T is singular where its excursion grazes or hits a junction at any
    sub-collision, so the proxy is the minimum of the tangency gap and
    junction distance over the whole excursion (the recorded
    min_singularity_distance of the induced step).
    """
    try:
        st = first_return(table, rule, x, cap=cap)
    except (SingularOrbit, NoReturnWithinCap):
        return 0.0
    return st.min_singularity_distance


def unstable_radius_proxy(table: TableGeometry, rule: ReducedSpaceRule,
                          x: PhasePoint, N: int, lambda_hat: float,
                          cap: int = DEFAULT_CAP) -> float:
    """min over 0 <= n <= N of lambda_hat^n * sing_dist_T(T^{-n} x).

    A computable stand-in for the unstable radius: points whose backward
    orbit approaches the singularity set of the induced map faster than
    delta Lambda^{-n} cannot carry long unstable manifolds.
    """
    best = induced_singularity_distance(table, rule, x, cap=cap)
    cur = x
    scale = 1.0
    for _ in range(N):
        cur = first_return_backward(table, rule, cur, cap=cap)
        scale *= lambda_hat
        val = scale * induced_singularity_distance(table, rule, cur, cap=cap)
        if val < best:
            best = val
    return best


@dataclass
class ZProxyResult:
    value: float
    n_used: int
    n_excluded: int


def z_function_proxy(radii: Sequence[float], weights: Sequence[float],
                     r: float) -> ZProxyResult:
    """Weighted empirical mean of radius^-r, normalized by the mean weight.

    Samples with zero radius are excluded and counted; if nothing remains
    the proxy diverges.
    """
    if not (0.0 < r <= 1.0):
        raise ValueError(f"r must lie in (0, 1], got {r}")
    num = 0.0
    den = 0.0
    used = 0
    excluded = 0
    for rad, g in zip(radii, weights):
        if g < 0:
            raise ValueError("weights must be nonnegative")
        if g == 0.0:
            continue
        if rad <= 0.0:
            excluded += 1
            continue
        num += g * rad ** (-r)
        den += g
        used += 1
    if used == 0 or den == 0.0:
        raise DivergentProxy(
            f"no usable samples ({excluded} with zero unstable radius)")
    return ZProxyResult(value=num / den, n_used=used, n_excluded=excluded)


def estimate_lambda_hat(table: TableGeometry, rule: ReducedSpaceRule,
                        n_samples: int, seed: int,
                        percentile: float = 1.0,
                        cap: int = DEFAULT_CAP) -> Tuple[float, float]:
    """Conservative expansion constant of the induced map.

    Returns (lambda_hat, fraction > 1): the given percentile of per-sample
    largest singular values of the Jacobian of T, and the fraction of
    samples that expanded at all.
    """
    rng = sample_rng(seed, 2)
    vals = []
    while len(vals) < n_samples:
        x = sample_reduced(table, rule, rng)
        try:
            J = fd_jacobian_T(table, rule, x, cap=cap)
        except (SingularNeighborhood, SingularOrbit, NoReturnWithinCap):
            continue
        vals.append(float(np.linalg.svd(J, compute_uv=False)[0]))
    arr = np.array(vals)
    return float(np.percentile(arr, percentile)), float(np.mean(arr > 1.0))


def hyperbolicity_fraction(table: TableGeometry, points: Sequence[PhasePoint],
                           ) -> float:
    """Fraction of points where the one-step Jacobian of F expands.

    The H1 smoke test evaluates this on dispersing-component collisions.
    """
    good = 0
    used = 0
    for x in points:
        try:
            s = expansion_factor(table, x)
        except SingularNeighborhood:
            continue
        used += 1
        if s > 1.0:
            good += 1
    if used == 0:
        raise SingularNeighborhood("no usable sample points")
    return good / used


@dataclass
class ExpansionDiagnostics:
    delta: float
    sums: List[float]
    sup_sum: float
    median_sum: float
    n_curves: int
    n_failed: int
    lambda_hat: float
    expanding_fraction: float


def one_step_expansion_sweep(table: TableGeometry, rule: ReducedSpaceRule,
                             deltas: Sequence[float], n_curves: int, seed: int,
                             npts: int = 33, cap: int = DEFAULT_CAP,
                             lambda_stats: Optional[Tuple[float, float]] = None
                             ) -> List[ExpansionDiagnostics]:
    """(H5) sums over sampled curves for each curve length delta."""
    if lambda_stats is None:
        lambda_stats = estimate_lambda_hat(table, rule,
                                           min(2000, 10 * n_curves), seed)
    lam, frac = lambda_stats
    out = []
    for di, delta in enumerate(deltas):
        rng = sample_rng(seed, 100 + di)
        sums = []
        failed = 0
        while len(sums) < n_curves:
            x = sample_reduced(table, rule, rng)
            try:
                curve = grow_unstable_curve(table, rule, x, delta, npts=npts,
                                            cap=cap)
                sums.append(one_step_expansion_sum(curve))
            except (SingularNeighborhood, SingularOrbit, NoReturnWithinCap,
                    OutOfRange):
                failed += 1
                if failed > 50 * n_curves:
                    raise
        arr = np.array(sums)
        out.append(ExpansionDiagnostics(
            delta=delta, sums=sums, sup_sum=float(arr.max()),
            median_sum=float(np.median(arr)), n_curves=len(sums),
            n_failed=failed, lambda_hat=lam, expanding_fraction=frac))
    return out


# ---------------------------------------------------------------------------
# (H6) exponent report

@dataclass
class H6Report:
    s_hat: float                  # from mu(D_m) ~ m^-(2+s)
    b_hat: float                  # from |W_alpha| ~ m^-(s+b) (unstable diam of D_m)
    d_hat: float                  # from |T W_alpha| ~ m^-d (unstable diam of TD_m)
    s0: float
    measure_fit: PowerLawFit
    u_diam_fit: PowerLawFit
    u_diam_img_fit: PowerLawFit
    inequality_1: Tuple[str, bool]        # b + s > 1/s0
    inequality_2: Optional[Tuple[str, bool]]  # s >= s0 (2 - b), only if b < 2

    @property
    def passed(self) -> bool:
        ok = self.inequality_1[1]
        if self.inequality_2 is not None:
            ok = ok and self.inequality_2[1]
        return ok


def h6_exponent_check(stats: CellStats, s0: float = 1.0, min_count: int = 40,
                      n_min: int = 3) -> H6Report:
    """Fit the cell-law exponents and evaluate the (H6) inequalities.

    s_hat comes from the per-cell measure fit mu(D_m) ~ m^-(2+s); the
    unstable-diameter fit of the D_m clouds estimates s+b; the image-cloud
    fit estimates d.  All three fits use the within-family estimator so
    prefactor differences between excursion families do not bias the
    slopes.  Requires diameters attached (attach_cell_diameters).
    """
    from .stats import cell_family_key, within_family_power_fit
    rows = [(cell_family_key(c), c.m, c.measure, c.u_diam, c.u_diam_img)
            for c in stats.cells
            if c.count >= min_count and c.n >= n_min
            and c.u_diam is not None and c.u_diam_img is not None]
    if len(rows) < 5:
        raise WindowTooSmall(
            f"only {len(rows)} cells with diameters (need >= 5)")
    fit_meas = within_family_power_fit([(k, m, v) for k, m, v, _, _ in rows])
    fit_u = within_family_power_fit([(k, m, v) for k, m, _, v, _ in rows])
    fit_ui = within_family_power_fit([(k, m, v) for k, m, _, _, v in rows])
    s_hat = fit_meas.exponent - 2.0
    b_hat = fit_u.exponent - s_hat
    d_hat = fit_ui.exponent
    ineq1 = (f"b+s = {b_hat + s_hat:.3f} > 1/s0 = {1.0 / s0:.3f}",
             b_hat + s_hat > 1.0 / s0)
    ineq2 = None
    if b_hat < 2.0:
        ineq2 = (f"s = {s_hat:.3f} >= s0(2-b) = {s0 * (2 - b_hat):.3f}",
                 s_hat >= s0 * (2.0 - b_hat))
    return H6Report(s_hat=s_hat, b_hat=b_hat, d_hat=d_hat, s0=s0,
                    measure_fit=fit_meas, u_diam_fit=fit_u,
                    u_diam_img_fit=fit_ui, inequality_1=ineq1,
                    inequality_2=ineq2)

"""Invariant-measure sampling and the statistical estimators of the lab.

Sampling: the billiard map preserves cos(phi) dr dphi (normalized); the
inverse CDF of the angle density is phi = arcsin(2u - 1).  Reduced-space
samples are drawn by rejection restricted to the components that can host
points of M, so the reported acceptance is the product of the candidate
length fraction and the within-candidate accept rate.

Determinism: heavy runs are split into fixed-size index chunks; chunk c uses
the RNG stream Philox(key=hash(seed, c)) and results are merged in chunk
order, so output bytes depend only on (seed, K, parameters), never on the
worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dynamics import PhasePoint, orbit_average
from .errors import (AcceptanceTooLow, InsufficientPoints, NoReturnWithinCap,
                     NoUsableWindow, SingularOrbit, WindowTooSmall)
from .geometry import TableGeometry, TableSpec, build_table
from .induced import (DEFAULT_CAP, InducedStep, ReducedSpaceRule,
                      candidate_components, first_return, in_reduced_space,
                      signature_of)
from .observables import Observable

CHUNK = 50_000          # fixed chunk size; checkpoint boundaries align with it
DEFAULT_POINT_CAP = 400  # retained points per cell for diameter proxies

_TABLE_CACHE: Dict[tuple, TableGeometry] = {}


def _cached_table(spec: TableSpec) -> TableGeometry:
    key = spec.key()
    t = _TABLE_CACHE.get(key)
    if t is None:
        t = build_table(spec)
        _TABLE_CACHE[key] = t
    return t


# ---------------------------------------------------------------------------
# RNG streams

def chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    """Counter-based stream for one index chunk: Philox keyed by (seed, chunk)."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed),
                                                counter=[0, 0, 0, chunk_index]))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for a single sample index (API/tests)."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed),
                                                counter=[0, 0, 1, index]))


# ---------------------------------------------------------------------------
# invariant-measure sampling

def phi_from_uniform(u: float) -> float:
    """Inverse CDF of the cos(phi)/2 density on [-pi/2, pi/2]."""
    return math.asin(2.0 * u - 1.0)


def sample_full_phase(table: TableGeometry, rng) -> PhasePoint:
    """One draw from the smooth invariant measure cos(phi) dr dphi."""
    g = rng.random() * table.total_length
    comp, r = table.locate(g)
    return PhasePoint(comp, r, phi_from_uniform(rng.random()))


def sample_full_phase_batch(table: TableGeometry, n: int, rng):
    """Vectorized full-phase sample: arrays (component, r, phi)."""
    g = rng.random(n) * table.total_length
    offs = table._offsets_arr
    comp = np.searchsorted(offs, g, side="right") - 1
    comp = np.clip(comp, 0, len(table.components) - 1)
    r = g - offs[comp]
    phi = np.arcsin(2.0 * rng.random(n) - 1.0)
    return comp.astype(np.int64), r, phi


@dataclass
class SampleBatch:
    seed: int
    count: int
    points: list
    draws: int = 0
    acceptance: float = 1.0
    discard_singular: int = 0
    discard_no_return: int = 0


def sample_reduced(table: TableGeometry, rule: ReducedSpaceRule, rng,
                   max_draws: int = 200_000) -> PhasePoint:
    """One draw from mu, the conditional invariant measure on M."""
    cands = candidate_components(table, rule)
    lens = [table.components[c].length for c in cands]
    total = sum(lens)
    cum = np.cumsum([0.0] + lens)
    frac = total / table.total_length
    draws = 0
    while True:
        g = rng.random() * total
        i = int(np.searchsorted(cum, g, side="right")) - 1
        i = min(max(i, 0), len(cands) - 1)
        x = PhasePoint(cands[i], g - cum[i], phi_from_uniform(rng.random()))
        draws += 1
        try:
            if in_reduced_space(table, rule, x):
                return x
        except Exception:
            pass   # backward probe grazed: reject, measure-zero boundary
        if draws >= 2000 and frac * (1.0 / draws) < 1e-4:
            raise AcceptanceTooLow(
                f"acceptance below 1e-4 after {draws} draws for rule {rule.kind}")
        if draws >= max_draws:
            raise AcceptanceTooLow(f"no acceptance in {max_draws} draws")


def sample_reduced_batch(table: TableGeometry, rule: ReducedSpaceRule, count: int,
                         seed: int) -> SampleBatch:
    """K accepted mu-draws with the acceptance bookkeeping of the sampler."""
    rng = sample_rng(seed, 0)
    cands = candidate_components(table, rule)
    lens = [table.components[c].length for c in cands]
    total = sum(lens)
    cum = np.cumsum([0.0] + lens)
    frac = total / table.total_length
    pts = []
    draws = 0
    while len(pts) < count:
        g = rng.random() * total
        i = int(np.searchsorted(cum, g, side="right")) - 1
        i = min(max(i, 0), len(cands) - 1)
        x = PhasePoint(cands[i], g - cum[i], phi_from_uniform(rng.random()))
        draws += 1
        try:
            if in_reduced_space(table, rule, x):
                pts.append(x)
        except Exception:
            pass
        if draws >= 2000 and frac * (len(pts) / draws) < 1e-4 and not pts:
            raise AcceptanceTooLow(f"acceptance below 1e-4 for rule {rule.kind}")
    return SampleBatch(seed=seed, count=count, points=pts, draws=draws,
                       acceptance=frac * (count / draws))


def membership_fraction(table: TableGeometry, rule: ReducedSpaceRule, n: int,
                        seed: int) -> Tuple[float, float]:
    """Monte Carlo estimate of mu_M(M) with binomial standard error.

    This is the independent oracle for Kac's formula: direct counting of
    full-phase samples that land in M.
    """
    rng = sample_rng(seed, 1)
    hits = 0
    used = 0
    for _ in range(n):
        x = sample_full_phase(table, rng)
        try:
            member = in_reduced_space(table, rule, x)
        except Exception:
            continue
        used += 1
        if member:
            hits += 1
    p = hits / used
    return p, math.sqrt(p * (1.0 - p) / used)


# ---------------------------------------------------------------------------
# cell statistics

@dataclass
class CellRecord:
    n: int
    j: int
    m: int
    signature: tuple
    count: int
    measure: float
    stderr: float
    start_cloud: Optional[np.ndarray] = None     # (k, 2) unwrapped (r, phi)
    end_cloud: Optional[np.ndarray] = None
    start_comp: int = -1
    end_comp: int = -1
    u_diam: Optional[float] = None
    s_diam: Optional[float] = None
    u_diam_img: Optional[float] = None
    s_diam_img: Optional[float] = None
    slope_sign: Optional[int] = None
    slope_sign_img: Optional[int] = None
    low_confidence: bool = False


@dataclass
class CellStats:
    family: str
    rule_kind: str
    seed: int
    K: int                       # accepted samples with a completed return
    draws: int
    acceptance: float
    counts_by_n: Dict[int, int]
    cells: List[CellRecord]
    n0: int
    discards: Dict[str, int]
    moment_checkpoints: List[dict] = field(default_factory=list)
    mean_R: float = math.nan
    se_R: float = math.nan

    def tail(self):
        """(n, mu(R >= n), binomial stderr) on 1..max observed n."""
        if not self.counts_by_n:
            return np.array([]), np.array([]), np.array([])
        n_max = max(self.counts_by_n)
        counts = np.zeros(n_max + 2)
        for n, c in self.counts_by_n.items():
            counts[n] = c
        tail_counts = np.cumsum(counts[::-1])[::-1]
        ns = np.arange(1, n_max + 1)
        p = tail_counts[1:n_max + 1] / self.K
        se = np.sqrt(np.clip(p * (1 - p), 0, None) / self.K)
        return ns, p, se

    def level_measures(self):
        """(n, mu(R = n), stderr) for all observed n, ascending."""
        ns = np.array(sorted(self.counts_by_n))
        c = np.array([self.counts_by_n[n] for n in ns], dtype=float)
        p = c / self.K
        se = np.sqrt(np.clip(p * (1 - p), 0, None) / self.K)
        return ns, p, se


def _empty_accumulator():
    return {
        "r_counts": {},          # n -> count
        "cell_counts": {},       # (n, sig) -> count
        "cell_pts": {},          # (n, sig) -> list of 6-tuples
        "sum_R": 0.0, "sum_R15": 0.0, "sum_R2": 0.0, "sum_RR": 0.0,
        "accepted": 0, "draws": 0,
        "discard_singular": 0, "discard_no_return": 0,
    }


def _merge_accumulator(tot, part, pt_cap):
    for n, c in part["r_counts"].items():
        tot["r_counts"][n] = tot["r_counts"].get(n, 0) + c
    for k, c in part["cell_counts"].items():
        tot["cell_counts"][k] = tot["cell_counts"].get(k, 0) + c
    for k, arr in part["cell_pts"].items():
        cur = tot["cell_pts"].get(k)
        if cur is None:
            tot["cell_pts"][k] = arr[:pt_cap]
        elif cur.shape[0] < pt_cap:
            tot["cell_pts"][k] = np.concatenate(
                [cur, arr[:pt_cap - cur.shape[0]]])
    for key in ("sum_R", "sum_R15", "sum_R2", "sum_RR", "accepted", "draws",
                "discard_singular", "discard_no_return"):
        tot[key] += part[key]


def _cells_chunk(args):
    (spec, rule, chunk_index, count, seed, cap, pt_cap) = args
    table = _cached_table(spec)
    rng = chunk_rng(seed, chunk_index)
    acc = _empty_accumulator()
    cands = candidate_components(table, rule)
    lens = [table.components[c].length for c in cands]
    total = sum(lens)
    cum = [0.0]
    for L in lens:
        cum.append(cum[-1] + L)
    r_counts = acc["r_counts"]
    cell_counts = acc["cell_counts"]
    cell_pts = acc["cell_pts"]
    uniform = rng.random
    produced = 0
    while produced < count:
        # rejection draw restricted to candidate components
        while True:
            g = uniform() * total
            i = 0
            while cum[i + 1] < g:
                i += 1
            x = PhasePoint(cands[i], g - cum[i], phi_from_uniform(uniform()))
            acc["draws"] += 1
            try:
                if in_reduced_space(table, rule, x):
                    break
            except Exception:
                pass
        produced += 1
        try:
            st = first_return(table, rule, x, cap=cap)
        except SingularOrbit:
            acc["discard_singular"] += 1
            continue
        except NoReturnWithinCap:
            acc["discard_no_return"] += 1
            continue
        n = st.R
        acc["accepted"] += 1
        acc["sum_R"] += n
        acc["sum_R15"] += n ** 1.5
        acc["sum_R2"] += float(n) * n
        acc["sum_RR"] += float(n) * n   # kept for variance of R
        r_counts[n] = r_counts.get(n, 0) + 1
        key = (n, st.signature)
        cell_counts[key] = cell_counts.get(key, 0) + 1
        pts = cell_pts.setdefault(key, [])
        if len(pts) < 6 * pt_cap:
            pts.extend((float(st.start.component), st.start.r, st.start.phi,
                        float(st.end.component), st.end.r, st.end.phi))
    acc["cell_pts"] = {k: np.array(v).reshape(-1, 6)
                       for k, v in cell_pts.items()}
    return acc


def _run_chunks(fn, args_list, workers):
    if workers <= 1 or len(args_list) <= 1:
        for a in args_list:
            yield fn(a)
        return
    with ProcessPoolExecutor(max_workers=workers) as ex:
        yield from ex.map(fn, args_list, chunksize=1)


def estimate_cell_measures(table: TableGeometry, rule: ReducedSpaceRule, K: int,
                           seed: int, cap: int = DEFAULT_CAP,
                           pt_cap: int = DEFAULT_POINT_CAP, workers: int = 1,
                           checkpoints: Sequence[int] = (),
                           low_confidence_below: int = 25) -> CellStats:
    """Stream K mu-samples through the first-return map and bin by cell.

    Cell measures are count/K with binomial standard errors.  Index chunks
    of fixed size are merged in order, so the result is independent of the
    worker count.  ``checkpoints`` (multiples of the chunk size) snapshot
    running moments of R for tail-stability diagnostics.
    """
    _TABLE_CACHE.setdefault(table.spec.key(), table)
    if K == 0:
        return CellStats(family=table.spec.family, rule_kind=rule.kind,
                         seed=seed, K=0, draws=0, acceptance=0.0,
                         counts_by_n={}, cells=[], n0=0, discards={})
    chunks = []
    idx = 0
    remaining = K
    while remaining > 0:
        c = min(CHUNK, remaining)
        chunks.append((table.spec, rule, idx, c, seed, cap, pt_cap))
        idx += 1
        remaining -= c
    tot = _empty_accumulator()
    done = 0
    cp = sorted(set(checkpoints))
    snapshots = []
    for part in _run_chunks(_cells_chunk, chunks, workers):
        _merge_accumulator(tot, part, pt_cap)
        done += part["accepted"] + part["discard_singular"] + part["discard_no_return"]
        while cp and done >= cp[0]:
            N = cp.pop(0)
            a = max(tot["accepted"], 1)
            snapshots.append({"N": done, "accepted": tot["accepted"],
                              "mean_R": tot["sum_R"] / a,
                              "moment_1_5": tot["sum_R15"] / a,
                              "moment_2": tot["sum_R2"] / a})
    return _finalize_cells(table, rule, seed, tot, snapshots, low_confidence_below)


def _finalize_cells(table, rule, seed, tot, snapshots, low_confidence_below):
    Kacc = tot["accepted"]
    cells = []
    by_n: Dict[int, list] = {}
    for (n, sig) in tot["cell_counts"]:
        by_n.setdefault(n, []).append(sig)
    n0 = max((len(v) for v in by_n.values()), default=0)
    for n in sorted(by_n):
        for j, sig in enumerate(sorted(by_n[n]), start=1):
            cnt = tot["cell_counts"][(n, sig)]
            p = cnt / Kacc if Kacc else 0.0
            se = math.sqrt(max(p * (1 - p), 0.0) / Kacc) if Kacc else 0.0
            pts = tot["cell_pts"].get((n, sig))
            rec = CellRecord(n=n, j=j, m=n0 * (n - 1) + j, signature=sig,
                             count=cnt, measure=p, stderr=se,
                             low_confidence=cnt < low_confidence_below)
            if pts is not None and pts.shape[0] > 0:
                rec.start_comp = int(pts[0, 0])
                rec.end_comp = int(pts[0, 3])
                rec.start_cloud = _unwrap_cloud(table, pts[:, 0:3])
                rec.end_cloud = _unwrap_cloud(table, pts[:, 3:6])
            cells.append(rec)
    mean_R = tot["sum_R"] / Kacc if Kacc else math.nan
    var_R = tot["sum_RR"] / Kacc - mean_R ** 2 if Kacc else math.nan
    se_R = math.sqrt(max(var_R, 0.0) / Kacc) if Kacc else math.nan
    frac = sum(table.components[c].length
               for c in candidate_components(table, rule)) / table.total_length
    acc_rate = frac * (Kacc + tot["discard_singular"] + tot["discard_no_return"]) \
        / max(tot["draws"], 1)
    return CellStats(
        family=table.spec.family, rule_kind=rule.kind, seed=seed, K=Kacc,
        draws=tot["draws"], acceptance=acc_rate,
        counts_by_n=dict(sorted(tot["r_counts"].items())), cells=cells, n0=n0,
        discards={"singular": tot["discard_singular"],
                  "no_return": tot["discard_no_return"]},
        moment_checkpoints=snapshots, mean_R=mean_R, se_R=se_R)


def _unwrap_cloud(table, triples: np.ndarray):
    """(comp, r, phi) rows -> (k, 2) array; r unwrapped on closed loops."""
    comp0 = int(triples[0, 0])
    r0 = float(triples[0, 1])
    out = np.empty((triples.shape[0], 2))
    comp_obj = table.components[comp0]
    r = triples[:, 1]
    if comp_obj.closed:
        L = comp_obj.length
        d = (r - r0 + 0.5 * L) % L - 0.5 * L
        out[:, 0] = r0 + d
    else:
        out[:, 0] = r
    out[:, 1] = triples[:, 2]
    return out


def cell_stats_from_counts(counts_by_n: Dict[int, int], K: int,
                           family: str = "synthetic") -> CellStats:
    """CellStats from given level-set counts (synthetic-law oracle tests)."""
    cells = []
    for n in sorted(counts_by_n):
        cnt = counts_by_n[n]
        p = cnt / K
        se = math.sqrt(max(p * (1 - p), 0.0) / K)
        cells.append(CellRecord(n=n, j=1, m=n, signature=(n,), count=cnt,
                                measure=p, stderr=se))
    tot = sum(n * c for n, c in counts_by_n.items())
    return CellStats(family=family, rule_kind="synthetic", seed=0, K=K,
                     draws=K, acceptance=1.0, counts_by_n=dict(counts_by_n),
                     cells=cells, n0=1, discards={},
                     mean_R=tot / K if K else math.nan)


# ---------------------------------------------------------------------------
# diameters

def cloud_extents(cloud: np.ndarray, debias: bool = True):
    """Oriented-box extents of a 2d cloud: (major, minor, major-axis slope sign).

    Axes are the principal directions of the centered cloud; extents are the
    peak-to-peak projections, major >= minor.  ``debias`` rescales by
    (k+1)/(k-1), the uniform order-statistics correction for the range of k
    samples, so sparsely-populated cells are comparable to dense ones.
    """
    k = cloud.shape[0]
    if k < 2:
        raise InsufficientPoints("need at least 2 points")
    centered = cloud - cloud.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt.T
    ext = proj.max(axis=0) - proj.min(axis=0)
    if debias:
        ext = ext * ((k + 1.0) / (k - 1.0))
    order = np.argsort(ext)[::-1]
    major_axis = vt[order[0]]
    slope_sign = int(np.sign(major_axis[0] * major_axis[1])) if major_axis[0] != 0 else 0
    return float(ext[order[0]]), float(ext[order[1]]), slope_sign


def estimate_cell_diameters(clouds: Dict[int, np.ndarray],
                            image_clouds: Dict[int, np.ndarray],
                            min_points: int = 25) -> Dict[int, dict]:
    """Diameter proxies per cell index m from point clouds of D_m and T D_m.

    The major extent is the unstable-diameter proxy, the minor extent the
    stable one.  Raises InsufficientPoints if any supplied cloud is smaller
    than ``min_points``.
    """
    out = {}
    for m, cloud in clouds.items():
        img = image_clouds.get(m)
        if cloud.shape[0] < min_points or img is None or img.shape[0] < min_points:
            raise InsufficientPoints(
                f"cell {m}: {cloud.shape[0]} points (< {min_points})")
        u, s, sgn = cloud_extents(cloud)
        ui, si, sgn_i = cloud_extents(img)
        out[m] = {"u_diam": u, "s_diam": s, "slope_sign": sgn,
                  "u_diam_img": ui, "s_diam_img": si, "slope_sign_img": sgn_i}
    return out


def unstable_slope_sign(table: TableGeometry, comp: int) -> int:
    """Chart slope sign of the unstable cone on a component.

    Dispersing and neutral components carry positive-slope unstable cones
    in (r, phi); on focusing arcs the expanding direction has negative
    slope.  Confirmed empirically against the principal axes of image
    cells (time reversal makes T D_m long in the unstable direction).
    """
    return -1 if table.components[comp].curvature_class == "focusing" else 1


def oriented_extents(cloud: np.ndarray, cone_sign: int):
    """(unstable, stable, major-axis slope sign) extents of a cell cloud.

    The principal axis whose slope sign matches the cone direction is the
    unstable proxy; degenerate (axis-aligned) clouds fall back to
    major -> unstable.
    """
    major, minor, major_sign = cloud_extents(cloud)
    if major_sign != 0 and major_sign != cone_sign:
        return minor, major, major_sign
    return major, minor, major_sign


def attach_cell_diameters(stats: CellStats, table: TableGeometry,
                          min_points: int = 25) -> CellStats:
    """Fill cone-oriented diameter proxies for well-populated cells."""
    for rec in stats.cells:
        if rec.start_cloud is None or rec.start_cloud.shape[0] < min_points:
            continue
        if rec.end_cloud is None or rec.end_cloud.shape[0] < min_points:
            continue
        rec.u_diam, rec.s_diam, rec.slope_sign = oriented_extents(
            rec.start_cloud, unstable_slope_sign(table, rec.start_comp))
        rec.u_diam_img, rec.s_diam_img, rec.slope_sign_img = oriented_extents(
            rec.end_cloud, unstable_slope_sign(table, rec.end_comp))
    return stats


# ---------------------------------------------------------------------------
# power-law and exponential-rate fitting

@dataclass(frozen=True)
class PowerLawFit:
    """value ~ C * n^(-exponent) over [n_lo, n_hi]."""

    exponent: float
    ci: Tuple[float, float]
    r2: float
    n_lo: float
    n_hi: float
    n_points: int
    prefactor: float
    hill: Optional[float] = None


def fit_power_law(pairs: Sequence[Tuple[float, float]],
                  window: Optional[Tuple[float, float]] = None,
                  sigmas: Optional[Sequence[float]] = None,
                  require_decade: bool = True,
                  min_points: int = 5) -> PowerLawFit:
    """Weighted least squares of log(value) on log(n).

    Positive-exponent convention: value = n^-3 fits to exponent +3.  By
    default the window must hold >= 5 points spanning at least one decade;
    pass require_decade=False for short observable ranges.
    """
    sig_list = [None] * len(pairs) if sigmas is None else list(sigmas)
    data = [(float(n), float(v), (None if s is None else float(s)))
            for (n, v), s in zip(pairs, sig_list)]
    if window is not None:
        lo, hi = window
        data = [d for d in data if lo <= d[0] <= hi]
    data = [d for d in data if d[0] > 0 and d[1] > 0]
    if len(data) < min_points:
        raise WindowTooSmall(f"{len(data)} usable points (< {min_points})")
    ns = np.array([d[0] for d in data])
    vs = np.array([d[1] for d in data])
    if require_decade and ns.max() / ns.min() < 10.0:
        raise WindowTooSmall(
            f"window [{ns.min():g}, {ns.max():g}] spans less than a decade")
    x = np.log(ns)
    y = np.log(vs)
    if sigmas is not None:
        sl = np.array([d[2] if d[2] and d[2] > 0 else np.nan for d in data])
        sig_log = sl / vs
        sig_log = np.where(np.isfinite(sig_log) & (sig_log > 0), sig_log,
                           np.nanmax(sig_log[np.isfinite(sig_log)])
                           if np.isfinite(sig_log).any() else 1.0)
        wts = 1.0 / sig_log ** 2
    else:
        wts = np.ones_like(x)
    W = np.sum(wts)
    xb = np.sum(wts * x) / W
    yb = np.sum(wts * y) / W
    sxx = np.sum(wts * (x - xb) ** 2)
    sxy = np.sum(wts * (x - xb) * (y - yb))
    slope = sxy / sxx
    intercept = yb - slope * xb
    resid = y - (intercept + slope * x)
    dof = max(len(x) - 2, 1)
    s2 = np.sum(wts * resid ** 2) / dof
    se_slope = math.sqrt(s2 / sxx)
    ss_tot = np.sum(wts * (y - yb) ** 2)
    r2 = 1.0 - np.sum(wts * resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    exponent = -slope
    return PowerLawFit(exponent=exponent,
                       ci=(exponent - 1.96 * se_slope, exponent + 1.96 * se_slope),
                       r2=float(r2), n_lo=float(ns.min()), n_hi=float(ns.max()),
                       n_points=len(x), prefactor=float(math.exp(intercept)))


def cell_family_key(rec: CellRecord):
    """Geometric family of a cell, stable across return times.

    Cells of one excursion family (same entry component, same first bounce
    type, same exit component, same alternation parity) share diameter and
    measure prefactors; their indices within the family scan m as n grows.
    """
    sig = rec.signature
    head0 = sig[0] if len(sig) > 0 else -1
    head1 = sig[1] if len(sig) > 1 else -1
    tail = sig[-1] if len(sig) > 0 else -1
    return (head0, head1, tail, rec.n % 2)


def within_family_power_fit(points: Sequence[Tuple[object, float, float]],
                            min_family_points: int = 3) -> PowerLawFit:
    """Pooled power-law slope with per-family intercepts (fixed effects).

    ``points`` are (family_key, n, value) triples.  Demeaning log n and
    log value within each family removes prefactor differences between
    excursion families, so the slope is not biased when the family mix
    changes along the fitted window (small cells of one family drop below
    the count threshold before another's).
    """
    groups: Dict[object, list] = {}
    for key, n, v in points:
        if n > 0 and v > 0:
            groups.setdefault(key, []).append((math.log(n), math.log(v)))
    xs, ys = [], []
    n_fam = 0
    for key, pts in groups.items():
        if len(pts) < min_family_points:
            continue
        n_fam += 1
        mx = sum(p[0] for p in pts) / len(pts)
        my = sum(p[1] for p in pts) / len(pts)
        for x, y in pts:
            xs.append(x - mx)
            ys.append(y - my)
    if n_fam == 0 or len(xs) < 5:
        raise WindowTooSmall(
            f"{len(xs)} demeaned points in {n_fam} families (need >= 5)")
    x = np.array(xs)
    y = np.array(ys)
    sxx = float(np.sum(x * x))
    if sxx <= 0:
        raise WindowTooSmall("no spread in the fitted window")
    slope = float(np.sum(x * y)) / sxx
    resid = y - slope * x
    dof = max(len(x) - n_fam - 1, 1)
    se_slope = math.sqrt(float(np.sum(resid ** 2)) / dof / sxx)
    ss_tot = float(np.sum(y ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    all_n = [n for _, n, v in points if n > 0 and v > 0]
    exponent = -slope
    return PowerLawFit(exponent=exponent,
                       ci=(exponent - 1.96 * se_slope,
                           exponent + 1.96 * se_slope),
                       r2=r2, n_lo=float(min(all_n)), n_hi=float(max(all_n)),
                       n_points=len(xs), prefactor=math.nan)


def fit_diameter_exponents(stats_obj: CellStats,
                           window: Optional[Tuple[float, float]] = None,
                           min_count: int = 50, image: bool = True,
                           n_min: int = 2):
    """(unstable, stable) diameter exponents vs the derived index m.

    Uses the within-family estimator on cells inside the window (default:
    the top decade of m among cells with at least ``min_count`` samples).
    ``image=True`` fits the T D_m clouds, False the D_m clouds.  The
    returned fits carry the requested window in (n_lo, n_hi).
    """
    import dataclasses

    rows = []
    for c in stats_obj.cells:
        u = c.u_diam_img if image else c.u_diam
        s = c.s_diam_img if image else c.s_diam
        if u is None or s is None or c.count < min_count or c.n < n_min:
            continue
        rows.append((cell_family_key(c), c.m, u, s))
    if not rows:
        raise WindowTooSmall("no cells with diameter proxies")
    m_hi = max(r[1] for r in rows)
    if window is None:
        window = (m_hi / 10.0, float(m_hi))
    lo, hi = window
    rows = [r for r in rows if lo <= r[1] <= hi]
    fit_u = within_family_power_fit([(k, m, u) for k, m, u, s in rows])
    fit_s = within_family_power_fit([(k, m, s) for k, m, u, s in rows])
    fit_u = dataclasses.replace(fit_u, n_lo=float(lo), n_hi=float(hi))
    fit_s = dataclasses.replace(fit_s, n_lo=float(lo), n_hi=float(hi))
    return fit_u, fit_s


def hill_tail_exponent(samples: Sequence[float], k: int) -> float:
    """Hill estimator of the tail index from the top k order statistics."""
    arr = np.sort(np.asarray(samples, dtype=float))[::-1]
    if k >= len(arr):
        raise WindowTooSmall(f"k={k} >= sample size {len(arr)}")
    top = arr[:k]
    ref = arr[k]
    if ref <= 0:
        raise WindowTooSmall("non-positive reference order statistic")
    return float(k / np.sum(np.log(top / ref)))


def hill_from_counts(counts_by_n: Dict[int, int], k: int) -> float:
    """Hill estimator applied to integer return-time counts."""
    vals = []
    for n in sorted(counts_by_n, reverse=True):
        need = k + 1 - len(vals)
        if need <= 0:
            break
        vals.extend([n] * min(counts_by_n[n], need))
    if len(vals) < k + 1:
        raise WindowTooSmall("not enough samples for the Hill estimator")
    top = np.array(vals[:k], dtype=float)
    ref = float(vals[k])
    return float(k / np.sum(np.log(top / ref)))


def auto_tail_window(stats: CellStats, min_tail_count: int = 100,
                     n_lo_floor: int = 3) -> Tuple[int, int]:
    """Default decade window for the tail fit: ends where counts thin out."""
    ns, p, _ = stats.tail()
    if len(ns) == 0:
        raise WindowTooSmall("no observed return times")
    counts = p * stats.K
    usable = ns[counts >= min_tail_count]
    if len(usable) == 0:
        raise WindowTooSmall("tail counts never reach the minimum")
    n_hi = int(usable.max())
    n_lo = max(n_lo_floor, n_hi // 10)   # floor division keeps a full decade
    return n_lo, n_hi


def _log_uniform_subsample(ns, per_decade=12):
    """Indices of ns closest to a log-uniform grid (dedup, ascending)."""
    ns = np.asarray(ns, dtype=float)
    lo, hi = ns.min(), ns.max()
    if lo <= 0 or hi <= lo:
        return np.arange(len(ns))
    k = max(2, int(math.ceil(per_decade * math.log10(hi / lo))) + 1)
    targets = np.geomspace(lo, hi, k)
    idx = sorted({int(np.argmin(np.abs(ns - t))) for t in targets})
    return np.array(idx)


def fit_tail_exponent(stats: CellStats,
                      window: Optional[Tuple[int, int]] = None,
                      require_decade: bool = True) -> PowerLawFit:
    """Power-law fit of mu(R >= n) with the auto decade window.

    Points are subsampled log-uniformly and fitted unweighted so that the
    densely-populated head of the window does not dominate the slope; the
    Hill estimate from the top return-time order statistics is attached.
    """
    ns, p, _ = stats.tail()
    if window is None:
        window = auto_tail_window(stats)
    lo, hi = window
    keep = (ns >= lo) & (ns <= hi) & (p > 0)
    ns_w, p_w = ns[keep], p[keep]
    if len(ns_w) < 5:
        raise WindowTooSmall(f"tail window [{lo}, {hi}] holds {len(ns_w)} points")
    idx = _log_uniform_subsample(ns_w)
    fit = fit_power_law(list(zip(ns_w[idx], p_w[idx])),
                        require_decade=require_decade)
    try:
        k = max(10, min(stats.K // 100, 10_000))
        hill = hill_from_counts(stats.counts_by_n, k)
    except WindowTooSmall:
        hill = None
    return PowerLawFit(exponent=fit.exponent, ci=fit.ci, r2=fit.r2,
                       n_lo=fit.n_lo, n_hi=fit.n_hi, n_points=fit.n_points,
                       prefactor=fit.prefactor, hill=hill)


def fit_level_exponent(stats: CellStats,
                       window: Optional[Tuple[int, int]] = None,
                       min_count: int = 25, n_lo: int = 3,
                       require_decade: bool = False) -> PowerLawFit:
    """Power-law fit of the level-set measures mu(R = n) over observed n.

    The default window runs from n_lo to the last n whose count clears
    ``min_count``; sub-decade ranges are allowed because deep cells are
    rare at desk scale.
    """
    ns, p, _ = stats.level_measures()
    if window is None:
        good = ns[(p * stats.K >= min_count)]
        if len(good) == 0:
            raise WindowTooSmall("no level sets with enough counts")
        window = (n_lo, int(good.max()))
    lo, hi = window
    keep = (ns >= lo) & (ns <= hi) & (p * stats.K >= min_count)
    ns_w, p_w = ns[keep], p[keep]
    if len(ns_w) < 5:
        raise WindowTooSmall(f"level window [{lo}, {hi}] holds {len(ns_w)} points")
    idx = _log_uniform_subsample(ns_w)
    return fit_power_law(list(zip(ns_w[idx], p_w[idx])),
                         require_decade=require_decade)


# ---------------------------------------------------------------------------
# correlation estimation

@dataclass(frozen=True)
class RateFit:
    """|Cov_n| ~ C * theta^n over the lag window."""

    theta: float
    ci: Tuple[float, float]
    window: Tuple[int, int]
    r2: float
    n_lags: int
    prefactor: float


@dataclass
class CorrelationEstimate:
    lags: np.ndarray
    cov: np.ndarray
    stderr: np.ndarray
    eff_count: np.ndarray
    noise_floor: float
    method: str
    f_name: str
    g_name: str
    seed: int
    K: int
    max_share: Optional[np.ndarray] = None
    fit: Optional[RateFit] = None
    fit_error: Optional[str] = None
    discards: Dict[str, int] = field(default_factory=dict)


class _LagSums:
    """Per-lag one-pass moment sums sufficient for Cov_n and its s.e."""

    FIELDS = ("c", "sf", "sg", "sfg", "sff", "sgg", "sffg", "sfgg", "sffgg",
              "max_abs")

    def __init__(self, n_lags):
        self.n_lags = n_lags
        for name in self.FIELDS:
            setattr(self, name, np.zeros(n_lags))

    def add(self, lag, f, g):
        fg = f * g
        self.c[lag] += 1
        self.sf[lag] += f
        self.sg[lag] += g
        self.sfg[lag] += fg
        self.sff[lag] += f * f
        self.sgg[lag] += g * g
        self.sffg[lag] += fg * f
        self.sfgg[lag] += fg * g
        self.sffgg[lag] += fg * fg
        a = abs(fg)
        if a > self.max_abs[lag]:
            self.max_abs[lag] = a

    def add_arrays(self, f_rows, g_vals, lens):
        """f_rows: list of per-sample lag arrays; lens: valid prefix lengths."""
        for f_arr, g, L in zip(f_rows, g_vals, lens):
            for lag in range(L):
                self.add(lag, f_arr[lag], g)

    def merge(self, other):
        for name in self.FIELDS:
            if name == "max_abs":
                np.maximum(self.max_abs, other.max_abs, out=self.max_abs)
            elif name == "c":
                self.c += other.c
            else:
                setattr(self, name, getattr(self, name) + getattr(other, name))

    def finish(self):
        c = np.maximum(self.c, 1.0)
        mf = self.sf / c
        mg = self.sg / c
        mfg = self.sfg / c
        cov = mfg - mf * mg
        m_ffgg = self.sffgg / c
        m_gg = self.sgg / c
        m_ff = self.sff / c
        m_ffg = self.sffg / c
        m_fgg = self.sfgg / c
        ew2 = (m_ffgg + mf ** 2 * m_gg + mg ** 2 * m_ff
               - 2 * mf * m_fgg - 2 * mg * m_ffg + 4 * mf * mg * mfg
               - 3 * mf ** 2 * mg ** 2)
        var_w = np.maximum(ew2 - cov ** 2, 0.0)
        se = np.sqrt(var_w / np.maximum(self.c - 1.0, 1.0))
        denom = np.where(np.abs(cov) > 0, c * np.abs(cov), np.inf)
        share = self.max_abs / denom
        return cov, se, self.c.copy(), share


def ensemble_covariance(f_matrix: np.ndarray, g_vector: np.ndarray,
                        valid_lens: Optional[np.ndarray] = None):
    """Covariance estimate from precomputed observable arrays.

    ``f_matrix[i, n]`` is f at lag n of sample i; ``g_vector[i]`` is g at
    lag 0.  ``valid_lens[i]`` (default: full width) limits the usable lags
    of sample i.  Returns (cov, stderr, eff_count, max_share).
    """
    K, n_lags = f_matrix.shape
    if valid_lens is None:
        valid_lens = np.full(K, n_lags, dtype=int)
    sums = _LagSums(n_lags)
    sums.add_arrays(f_matrix, g_vector, valid_lens)
    return sums.finish()


def estimate_correlation(table: TableGeometry, rule: ReducedSpaceRule,
                         f: Observable, g: Observable, n_max: int, K: int,
                         seed: int, cap: int = DEFAULT_CAP,
                         method: str = "ensemble",
                         orbit_len: Optional[int] = None,
                         burn_in: int = 1000,
                         n_batches: int = 50,
                         fit_window: Optional[Tuple[int, int]] = None
                         ) -> CorrelationEstimate:
    """Cov_n(f, g) for n = 0..n_max on the induced system.

    ensemble: K independent mu-starts, each iterated n_max+1 induced steps;
    plug-in lag-matched means make Cov_n(f, const) vanish identically.

    single-orbit: one long orbit (``orbit_len`` returns after ``burn_in``),
    lagged products, batch-means standard errors with orbit_len/50 batches.
    """
    keep_path = f.needs_path or g.needs_path
    if method == "ensemble":
        est = _corr_ensemble(table, rule, f, g, n_max, K, seed, cap, keep_path)
    elif method == "single-orbit":
        N = orbit_len if orbit_len is not None else K
        est = _corr_single_orbit(table, rule, f, g, n_max, N, seed, cap,
                                 keep_path, burn_in, n_batches)
    else:
        raise ValueError(f"unknown method {method!r}")
    try:
        est.fit = fit_exponential_rate(est, window=fit_window)
    except (NoUsableWindow, WindowTooSmall) as e:
        est.fit_error = f"{type(e).__name__}: {e}"
    return est


def _corr_ensemble(table, rule, f, g, n_max, K, seed, cap, keep_path):
    sums = _LagSums(n_max + 1)
    discards = {"singular": 0, "no_return": 0, "sampling": 0}
    chunks = []
    idx = 0
    remaining = K
    while remaining > 0:
        c = min(CHUNK, remaining)
        chunks.append((idx, c))
        idx += 1
        remaining -= c
    for chunk_index, count in chunks:
        rng = chunk_rng(seed, chunk_index)
        for _ in range(count):
            try:
                x = sample_reduced(table, rule, rng)
            except AcceptanceTooLow:
                raise
            f_vals = np.empty(n_max + 1)
            g_val = None
            lag = 0
            cur = x
            while lag <= n_max:
                try:
                    st = first_return(table, rule, cur, cap=cap,
                                      keep_path=keep_path)
                except SingularOrbit:
                    discards["singular"] += 1
                    break
                except NoReturnWithinCap:
                    discards["no_return"] += 1
                    break
                f_vals[lag] = f(st)
                if lag == 0:
                    g_val = g(st)
                cur = st.end
                lag += 1
            if g_val is None:
                continue
            for L in range(lag):
                sums.add(L, f_vals[L], g_val)
    cov, se, eff, share = sums.finish()
    floor = 2.0 * float(np.median(se[1:])) if n_max >= 1 else 0.0
    return CorrelationEstimate(
        lags=np.arange(n_max + 1), cov=cov, stderr=se, eff_count=eff,
        noise_floor=floor, method="ensemble", f_name=f.name, g_name=g.name,
        seed=seed, K=K, max_share=share, discards=discards)


def _corr_single_orbit(table, rule, f, g, n_max, N, seed, cap, keep_path,
                       burn_in, n_batches):
    rng = chunk_rng(seed, 0)
    discards = {"singular": 0, "no_return": 0, "restarts": 0}
    f_series = np.empty(N)
    g_series = np.empty(N)
    cur = sample_reduced(table, rule, rng)
    done = -burn_in
    while done < N:
        try:
            st = first_return(table, rule, cur, cap=cap, keep_path=keep_path)
        except (SingularOrbit, NoReturnWithinCap) as e:
            key = "singular" if isinstance(e, SingularOrbit) else "no_return"
            discards[key] += 1
            discards["restarts"] += 1
            cur = sample_reduced(table, rule, rng)
            continue
        if done >= 0:
            f_series[done] = f(st)
            g_series[done] = g(st)
        cur = st.end
        done += 1
    lags = np.arange(n_max + 1)
    cov = np.empty(n_max + 1)
    se = np.empty(n_max + 1)
    eff = np.empty(n_max + 1)
    batch_len = max(1, N // n_batches)
    for n in lags:
        fn = f_series[n:]
        gn = g_series[:N - n]
        w = (fn - fn.mean()) * (gn - gn.mean())
        cov[n] = w.mean()
        nb = max(1, len(w) // batch_len)
        bm = np.array([w[k * batch_len:(k + 1) * batch_len].mean()
                       for k in range(nb)])
        se[n] = float(np.std(bm, ddof=1) / math.sqrt(nb)) if nb > 1 else math.inf
        eff[n] = len(w)
    floor = 2.0 * float(np.median(se[1:])) if n_max >= 1 else 0.0
    return CorrelationEstimate(
        lags=lags, cov=cov, stderr=se, eff_count=eff, noise_floor=floor,
        method="single-orbit", f_name=f.name, g_name=g.name, seed=seed, K=N,
        discards=discards)


def fit_exponential_rate(est: CorrelationEstimate,
                         window: Optional[Tuple[int, int]] = None,
                         floor: Optional[float] = None,
                         min_lags: int = 4) -> RateFit:
    """Weighted regression of log|Cov_n| on n over the usable lag window.

    The window defaults to the largest contiguous lag range with |Cov_n|
    above the noise floor (2x median standard error).  theta = exp(slope).
    """
    if floor is None:
        floor = est.noise_floor
    cov = est.cov
    lags = est.lags
    if window is not None:
        lo, hi = window
        mask = (lags >= lo) & (lags <= hi) & (np.abs(cov) > 0)
    else:
        usable = np.abs(cov) > floor
        best = (0, -1)   # (length, start)
        run = 0
        for i, u in enumerate(usable):
            run = run + 1 if u else 0
            if run > best[0]:
                best = (run, i - run + 1)
        if best[0] < min_lags:
            raise NoUsableWindow(
                f"only {best[0]} contiguous lags above the noise floor "
                f"{floor:.3g}")
        mask = np.zeros_like(usable)
        mask[best[1]:best[1] + best[0]] = True
    n = lags[mask]
    c = np.abs(cov[mask])
    s = est.stderr[mask]
    if len(n) < min_lags:
        raise NoUsableWindow(f"window holds {len(n)} lags (< {min_lags})")
    sig_log = np.where(c > 0, s / c, np.inf)
    sig_log = np.where(np.isfinite(sig_log) & (sig_log > 0), sig_log, 1.0)
    wts = 1.0 / sig_log ** 2
    x = n.astype(float)
    y = np.log(c)
    W = wts.sum()
    xb = (wts * x).sum() / W
    yb = (wts * y).sum() / W
    sxx = (wts * (x - xb) ** 2).sum()
    slope = (wts * (x - xb) * (y - yb)).sum() / sxx
    intercept = yb - slope * xb
    resid = y - (intercept + slope * x)
    dof = max(len(x) - 2, 1)
    se_slope = math.sqrt((wts * resid ** 2).sum() / dof / sxx)
    ss_tot = (wts * (y - yb) ** 2).sum()
    r2 = 1.0 - (wts * resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    theta = math.exp(slope)
    return RateFit(theta=theta,
                   ci=(math.exp(slope - 1.96 * se_slope),
                       math.exp(slope + 1.96 * se_slope)),
                   window=(int(n.min()), int(n.max())), r2=float(r2),
                   n_lags=len(n), prefactor=float(math.exp(intercept)))


# ---------------------------------------------------------------------------
# invariance check (Birkhoff averages vs direct Monte Carlo)

def invariance_check(table: TableGeometry, n_orbit: int, n_mc: int, seed: int):
    """Compare orbit averages of cos(phi) and cos(2 pi r/|bQ|) with direct
    Monte Carlo integrals against cos(phi) dr dphi.

    Returns a list of dicts with means, combined standard errors and the
    z-scores; the invariant measure makes every z small.
    """
    rng = chunk_rng(seed, 7)
    offs = table._offsets
    L = table.total_length

    def h_phi(c, r, phi):
        return math.cos(phi)

    def h_r(c, r, phi):
        return math.cos(2.0 * math.pi * (offs[c] + r) / L)

    def restart():
        return sample_full_phase(table, rng)

    x0 = sample_full_phase(table, rng)
    means, se, done, discards = orbit_average(table, x0, n_orbit,
                                              [h_phi, h_r], restart=restart)
    comp, r, phi = sample_full_phase_batch(table, n_mc, chunk_rng(seed, 8))
    g_r = table._offsets_arr[comp] + r
    mc_vals = [np.cos(phi), np.cos(2.0 * math.pi * g_r / L)]
    out = []
    for name, i, mc in (("cos_phi", 0, mc_vals[0]), ("cos_r", 1, mc_vals[1])):
        mc_mean = float(mc.mean())
        mc_se = float(mc.std(ddof=1) / math.sqrt(n_mc))
        comb = math.hypot(se[i], mc_se)
        out.append({"observable": name, "orbit_mean": float(means[i]),
                    "orbit_se": float(se[i]), "mc_mean": mc_mean,
                    "mc_se": mc_se, "combined_se": comb,
                    "z": (float(means[i]) - mc_mean) / comb if comb > 0 else 0.0,
                    "orbit_steps": done, "orbit_discards": discards})
    return out

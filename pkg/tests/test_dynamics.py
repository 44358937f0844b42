import math

import numpy as np
import pytest

from billiards.dynamics import (PhasePoint, billiard_map, direction_of,
                                expansion_factor, involution, next_collision,
                                orbit_points, reflect, singularity_distance)
from billiards.errors import NearTangency, NotIncoming
from billiards.geometry import TableSpec, build_table

SQRT2_2 = math.sqrt(2) / 2


def obstacle_top(sinai):
    # obstacle circle: psi(r) = -r/rho, top of the obstacle sits at angle pi/2
    rho = sinai.spec.rho
    return PhasePoint(4, rho * 1.5 * math.pi, 0.0)


def test_reflect_head_on():
    assert reflect((0.0, -1.0), (0.0, 1.0)) == pytest.approx((0.0, 1.0))


def test_reflect_mirror():
    out = reflect((SQRT2_2, -SQRT2_2), (0.0, 1.0))
    assert out == pytest.approx((SQRT2_2, SQRT2_2), abs=1e-15)
    assert math.hypot(*out) == pytest.approx(1.0, abs=1e-14)


def test_reflect_grazing_not_incoming():
    with pytest.raises(NotIncoming):
        reflect((1.0, 0.0), (0.0, 1.0))


def test_next_collision_ray_to_top_wall(sinai):
    rec = next_collision(sinai, (0.5, 0.75), (0.0, 1.0))
    assert rec.tau == pytest.approx(0.25, abs=1e-12)
    assert rec.next.component == 2
    assert rec.seg_end == pytest.approx((0.5, 1.0), abs=1e-12)


def test_next_collision_ray_to_obstacle(sinai):
    rec = next_collision(sinai, (0.5, 1.0), (0.0, -1.0))
    assert rec.next.component == 4
    assert rec.tau == pytest.approx(0.25, abs=1e-12)
    assert rec.next.phi == pytest.approx(0.0, abs=1e-12)
    assert rec.seg_end == pytest.approx((0.5, 0.75), abs=1e-12)


def test_next_collision_stadium_axial_chord(stadium):
    rec = next_collision(stadium, (-2.0, 0.0), (1.0, 0.0))
    assert rec.tau == pytest.approx(4.0, abs=1e-12)
    assert rec.seg_end == pytest.approx((2.0, 0.0), abs=1e-9)
    assert rec.next.phi == pytest.approx(0.0, abs=1e-9)


def test_billiard_map_vertical_bounce(sinai):
    x = obstacle_top(sinai)
    y, tau = billiard_map(sinai, x)
    assert tau == pytest.approx(0.25, abs=1e-12)
    assert y.component == 2           # top wall
    assert y.r == pytest.approx(0.5, abs=1e-12)
    assert y.phi == pytest.approx(0.0, abs=1e-12)
    z, tau2 = billiard_map(sinai, y)
    assert z.component == 4
    assert tau2 == pytest.approx(0.25, abs=1e-12)


def test_billiard_map_stadium_axial(stadium):
    left_apex = PhasePoint(3, math.pi / 2, 0.0)
    pos, d = direction_of(stadium, left_apex)
    assert pos == pytest.approx((-2.0, 0.0), abs=1e-12)
    y, tau = billiard_map(stadium, left_apex)
    assert tau == pytest.approx(4.0, abs=1e-12)
    assert y.component == 1
    assert abs(y.phi) < 1e-9


def test_involution_basics():
    x = PhasePoint(2, 0.7, 0.3)
    assert involution(x) == PhasePoint(2, 0.7, -0.3)
    assert involution(involution(x)) == x
    assert involution(PhasePoint(1, 0.1, 0.0)) == PhasePoint(1, 0.1, 0.0)


def test_time_reversal_roundtrip(sinai):
    rng = np.random.default_rng(7)
    checked = 0
    worst = 0.0
    while checked < 10_000:
        comp = int(rng.integers(0, 5))
        L = sinai.components[comp].length
        x = PhasePoint(comp, float(rng.uniform(0, L)),
                       float(math.asin(2 * rng.random() - 1)))
        try:
            y, _ = billiard_map(sinai, x)
            z, _ = billiard_map(sinai, involution(y))
            w = involution(z)
        except Exception:
            continue
        checked += 1
        err = abs(sinai.chart_delta_r(x.component, w.r, x.r)) + abs(w.phi - x.phi)
        worst = max(worst, err if w.component == x.component else math.inf)
    assert worst < 1e-9


def test_unit_direction_along_orbit(sinai):
    # energy conservation: reconstructed directions stay unit over 1e6 steps
    x = PhasePoint(4, 0.11, 0.2)
    worst = 0.0
    for _ in range(1_000_000):
        pos, d = direction_of(sinai, x)
        err = abs(math.hypot(*d) - 1.0)
        if err > worst:
            worst = err
        x, _ = billiard_map(sinai, x)
    assert worst < 1e-12


def test_collision_record_positions_on_boundary(sinai):
    rng = np.random.default_rng(13)
    for _ in range(200):
        comp = int(rng.integers(0, 5))
        L = sinai.components[comp].length
        x = PhasePoint(comp, float(rng.uniform(0, L)),
                       float(math.asin(2 * rng.random() - 1)))
        try:
            pos, d = direction_of(sinai, x)
            rec = next_collision(sinai, pos, d)
        except Exception:
            continue
        on_bdy, _, _ = sinai.point_normal_curvature(rec.next.component,
                                                    rec.next.r)
        gap = math.hypot(on_bdy[0] - rec.seg_end[0], on_bdy[1] - rec.seg_end[1])
        assert gap < 1e-9
        assert rec.tau > 0


def test_grazing_start_rejected(sinai):
    with pytest.raises(NearTangency):
        billiard_map(sinai, PhasePoint(4, 0.1, math.pi / 2 - 1e-10))


def test_singularity_distance_tangency_dominates(sinai):
    x = PhasePoint(0, 0.5, math.pi / 2 - 1e-4)
    assert singularity_distance(sinai, x) == pytest.approx(1e-4, rel=1e-6)


def test_singularity_distance_mid_wall(sinai):
    # straight-up bounce off the bottom wall: forward step is head-on,
    # so the corner distance 0.5 is the binding term
    x = PhasePoint(0, 0.5, 0.0)
    assert singularity_distance(sinai, x) == pytest.approx(0.5, abs=1e-12)


def test_singularity_distance_at_junction(sinai):
    assert singularity_distance(sinai, PhasePoint(0, 0.0, 0.3)) == 0.0


def test_hyperbolicity_smoke(sinai):
    # (H1) proxy: one-step Jacobian expands on nearly all obstacle collisions
    rng = np.random.default_rng(11)
    obstacle = sinai.components[4]
    expanding = 0
    used = 0
    while used < 500:
        x = PhasePoint(4, float(rng.uniform(0, obstacle.length)),
                       float(math.asin(2 * rng.random() - 1)))
        try:
            s = expansion_factor(sinai, x)
        except Exception:
            continue
        used += 1
        if s > 1.0:
            expanding += 1
    assert expanding / used >= 0.99


def test_orbit_points_prefix(sinai):
    rows, cause = orbit_points(sinai, PhasePoint(4, 0.3, 0.15), 100)
    assert len(rows) == 100 and cause is None
    for x, tau, sd in rows:
        assert tau > 0
        assert sd >= 0


def test_cusp_deep_series_progresses(cusp):
    # a near-tangential start on one cusp arc generates a convergent series
    # of short flights without numerical escape
    x = PhasePoint(0, 0.02 * cusp.components[0].length, 1.2)
    rows, cause = orbit_points(cusp, x, 2000)
    assert len(rows) > 100
    taus = [tau for _, tau, _ in rows]
    assert min(taus) > 0


def test_flat_two_periodic_orbit(flat):
    ceil = flat.components[2]
    x = PhasePoint(2, ceil.length / 2, 0.0)
    y, tau = billiard_map(flat, x)
    assert y.component == 0
    assert tau == pytest.approx(flat.spec.gap, abs=1e-9)
    assert y.phi == pytest.approx(0.0, abs=1e-12)
    z, _ = billiard_map(flat, y)
    assert z.component == 2
    assert z.r == pytest.approx(x.r, abs=1e-9)

import math

import numpy as np
import pytest

from billiards.errors import InvalidGeometry, OutOfRange
from billiards.geometry import TableSpec, build_table


def test_sinai_perimeter_and_components(sinai):
    assert sinai.total_length == pytest.approx(4 + math.pi / 2, abs=1e-12)
    assert len(sinai.components) == 5
    kinds = [c.kind for c in sinai.components]
    assert kinds.count("segment") == 4
    assert kinds.count("circular-arc") == 1
    assert sinai.components[4].closed


def test_stadium_perimeter_and_components(stadium):
    assert stadium.total_length == pytest.approx(2 * math.pi + 4, abs=1e-12)
    assert len(stadium.components) == 4


def test_obstacle_too_large_rejected():
    with pytest.raises(InvalidGeometry):
        build_table(TableSpec(family="semi-dispersing-square", a=1.0, rho=0.6))
    with pytest.raises(InvalidGeometry):
        build_table(TableSpec(family="semi-dispersing-square", a=1.0, rho=-0.1))


def test_beta_below_two_rejected():
    with pytest.raises(InvalidGeometry):
        build_table(TableSpec(family="flat-point", beta=2.0))


def test_unknown_family_rejected():
    with pytest.raises(InvalidGeometry):
        build_table(TableSpec(family="pentagon"))


@pytest.mark.parametrize("fixture", ["sinai", "stadium", "cusp", "flat"])
def test_unit_speed_parametrization(fixture, request):
    table = request.getfixturevalue(fixture)
    rng = np.random.default_rng(0)
    h = 1e-5
    for c in table.components:
        rs = rng.uniform(2 * h, c.length - 2 * h, size=1000)
        for r in rs:
            p1, _, _ = c.point_normal_curvature(r - h)
            p2, _, _ = c.point_normal_curvature(r + h)
            speed = math.hypot(p2[0] - p1[0], p2[1] - p1[1]) / (2 * h)
            assert 1 - 1e-8 <= speed <= 1 + 1e-8


def test_normals_point_inward(sinai, stadium, cusp, flat):
    for table in (sinai, stadium, cusp, flat):
        for c in table.components:
            for frac in (0.1, 0.35, 0.6, 0.9):
                pos, n, _ = c.point_normal_curvature(frac * c.length)
                assert table.contains(pos[0] + 1e-7 * n[0], pos[1] + 1e-7 * n[1])
                assert math.hypot(*n) == pytest.approx(1.0, abs=1e-12)


def test_stadium_arc_midpoint_normal_and_curvature(stadium):
    left = stadium.components[3]
    pos, n, kappa = left.point_normal_curvature(left.length / 2)
    assert pos[0] == pytest.approx(-2.0, abs=1e-12)
    assert pos[1] == pytest.approx(0.0, abs=1e-12)
    assert n == pytest.approx((1.0, 0.0), abs=1e-12)   # toward the interior
    assert abs(kappa) == pytest.approx(1.0, abs=1e-12)
    assert kappa < 0  # focusing arcs are negative in this convention
    assert left.curvature_class == "focusing"


def test_square_wall_midpoint(sinai):
    bottom = sinai.components[0]
    pos, n, kappa = bottom.point_normal_curvature(0.5)
    assert pos == pytest.approx((0.5, 0.0), abs=1e-15)
    assert n == pytest.approx((0.0, 1.0), abs=1e-15)
    assert kappa == 0.0


def test_obstacle_curvature_positive(sinai):
    obstacle = sinai.components[4]
    for frac in np.linspace(0.01, 0.99, 23):
        _, _, kappa = obstacle.point_normal_curvature(frac * obstacle.length)
        assert kappa == pytest.approx(4.0, abs=1e-12)   # 1/rho, dispersing


def test_flat_curve_single_zero_curvature(flat):
    floor = flat.components[0]
    mid = floor.length / 2
    _, _, k0 = floor.point_normal_curvature(mid)
    assert k0 == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(1)
    for r in rng.uniform(0, floor.length, size=1000):
        _, _, k = floor.point_normal_curvature(r)
        if abs(r - mid) > 1e-3:
            assert k > 0.0     # dispersing away from the flat point


def test_dispersing_components_strictly_positive_curvature(cusp):
    rng = np.random.default_rng(2)
    for c in cusp.components:
        for r in rng.uniform(0, c.length, size=200):
            _, _, k = c.point_normal_curvature(r)
            assert k > 0


def test_junction_classification(sinai, stadium, cusp, flat):
    kinds = sorted(j.kind for j in sinai.junctions)
    assert kinds == ["corner"] * 4
    assert sorted(j.kind for j in stadium.junctions) == ["smooth"] * 4
    assert sorted(j.kind for j in cusp.junctions) == ["tangential"] * 3
    assert sorted(j.kind for j in flat.junctions) == ["corner"] * 4


def test_out_of_range(sinai):
    with pytest.raises(OutOfRange):
        sinai.components[0].point_normal_curvature(1.5)
    with pytest.raises(OutOfRange):
        sinai.components[0].point_normal_curvature(-0.1)
    with pytest.raises(OutOfRange):
        sinai.point_normal_curvature(99, 0.0)


def test_global_chart_roundtrip(stadium):
    rng = np.random.default_rng(3)
    for g in rng.uniform(0, stadium.total_length, size=200):
        comp, r = stadium.locate(g)
        assert stadium.global_r(comp, r) == pytest.approx(g, abs=1e-12)


def test_component_lengths_sum(sinai, stadium, cusp, flat):
    for table in (sinai, stadium, cusp, flat):
        total = sum(c.length for c in table.components)
        assert abs(total - table.total_length) <= 1e-10 * table.total_length


def test_describe_is_json_friendly(sinai):
    import json
    desc = sinai.describe()
    text = json.dumps(desc, sort_keys=True)
    assert "components" in desc and len(desc["components"]) == 5
    assert json.loads(text)["total_length"] == pytest.approx(4 + math.pi / 2)

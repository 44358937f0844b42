import math

import pytest

from billiards.dynamics import PhasePoint
from billiards.induced import first_return
from billiards.observables import (Observable, free_path, induced_sum,
                                   make_observable, point_observable,
                                   return_time, truncated_return_time)
from billiards import stats


@pytest.fixture(scope="module")
def vertical_step(sinai, sinai_rule):
    rho = sinai.spec.rho
    return first_return(sinai, sinai_rule, PhasePoint(4, rho * 1.5 * math.pi, 0.0),
                        keep_path=True)


@pytest.fixture(scope="module")
def axial_step(stadium, stadium_rule):
    return first_return(stadium, stadium_rule, PhasePoint(3, math.pi / 2, 0.0),
                        keep_path=True)


def test_return_time_values(vertical_step, axial_step):
    assert return_time(vertical_step) == 2.0
    assert return_time(axial_step) == 1.0


def test_return_time_at_least_one(sinai, sinai_rule):
    rng = stats.sample_rng(9, 0)
    for _ in range(200):
        x = stats.sample_reduced(sinai, sinai_rule, rng)
        try:
            st = first_return(sinai, sinai_rule, x)
        except Exception:
            continue
        assert return_time(st) >= 1.0


def test_truncation():
    class Fake:
        R = 7
    assert truncated_return_time(Fake, 5) == 5.0
    Fake.R = 3
    assert truncated_return_time(Fake, 5) == 3.0
    Fake.R = 12
    assert truncated_return_time(Fake, 1) == 1.0
    with pytest.raises(ValueError):
        truncated_return_time(Fake, 0)


def test_induced_sum_constant_kernels(vertical_step):
    assert induced_sum(lambda p: 1.0, vertical_step) == vertical_step.R + 1
    assert induced_sum(lambda p: 0.0, vertical_step) == 0.0
    assert induced_sum(lambda p: 1.0, vertical_step,
                       endpoint_mode="half-open") == vertical_step.R


def test_induced_sum_cos_phi_symmetric_orbit(vertical_step):
    # all three collisions of the vertical bounce are head-on
    val = induced_sum(lambda p: math.cos(p.phi), vertical_step)
    assert val == pytest.approx(3.0, abs=1e-12)


def test_induced_sum_needs_path(sinai, sinai_rule):
    rho = sinai.spec.rho
    st = first_return(sinai, sinai_rule, PhasePoint(4, rho * 1.5 * math.pi, 0.0))
    with pytest.raises(ValueError):
        induced_sum(lambda p: 1.0, st)


def test_free_path_values(vertical_step, axial_step):
    assert free_path(vertical_step) == pytest.approx(0.5, abs=1e-12)
    assert free_path(axial_step) == pytest.approx(4.0, abs=1e-12)
    assert free_path(vertical_step) > 0


def test_growth_envelope_constant_is_one(sinai, sinai_rule):
    # R equals n on every cell with return time n, so sup R(x) * n^-1 = 1
    rng = stats.sample_rng(9, 1)
    ratios = []
    for _ in range(300):
        x = stats.sample_reduced(sinai, sinai_rule, rng)
        try:
            st = first_return(sinai, sinai_rule, x)
        except Exception:
            continue
        ratios.append(return_time(st) / st.R)
    assert max(ratios) == 1.0 and min(ratios) == 1.0


def test_make_observable_registry(sinai):
    r_obs = make_observable(sinai, "R")
    assert r_obs.tail == "polynomial"
    rt = make_observable(sinai, "R_trunc", cap_T=5)
    assert rt.bound == 5.0
    fp = make_observable(sinai, "free_path")
    isum = make_observable(sinai, "induced_sum", fhat="cos_phi")
    assert isum.needs_path
    with pytest.raises(ValueError):
        make_observable(sinai, "nope")
    with pytest.raises(ValueError):
        make_observable(sinai, "induced_sum", fhat="bad_kernel")


def test_induced_sum_equals_R_plus_one(sinai, sinai_rule):
    # module invariant: the constant-kernel excursion sum is R + 1 everywhere
    rng = stats.sample_rng(9, 2)
    const = make_observable(sinai, "induced_sum", fhat="const")
    for _ in range(100):
        x = stats.sample_reduced(sinai, sinai_rule, rng)
        try:
            st = first_return(sinai, sinai_rule, x, keep_path=True)
        except Exception:
            continue
        assert const(st) == return_time(st) + 1


def test_point_observable_wraps_start():
    obs = point_observable("cos_phi", lambda p: math.cos(p.phi), bound=1.0)

    class FakeStep:
        start = PhasePoint(0, 0.1, 0.5)
    assert obs(FakeStep) == pytest.approx(math.cos(0.5))

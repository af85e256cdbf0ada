import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sieve_homog.pcapacity import (CapacityProblem, EmptySet, PlanarPatch, RotatedSet, SolidSet,
                                   aligned_frame, ball_capacity, cell_capacity, comparison_function,
                                   estimate_energy, farfield_bound_check, farfield_correction,
                                   farfield_tolerance, mean_capacity, plane_tilt_gap, pullback_metric,
                                   richardson, scaling_check, slice, slice_support, solve_capacity,
                                   tangent_approx_gap)
from sieve_homog.surface import HoleShape, SieveConfig, plane_surface, quadratic_surface


def test_ball_capacity_closed_forms():
    # Newtonian condenser 4 pi / (1/r - 1/R)
    assert ball_capacity(3, 2.0, 1.0, 4.0) == pytest.approx(4 * math.pi / (1 - 0.25))
    assert ball_capacity(3, 2.0, 1.0) == pytest.approx(4 * math.pi)
    # global value is the R -> infinity limit
    assert ball_capacity(2, 1.3, 0.5, 1e8) == pytest.approx(ball_capacity(2, 1.3, 0.5), rel=1e-6)


@pytest.mark.parametrize("d,p,r,R", [(3, 2.0, 1.0, 4.0), (2, 1.3, 0.5, 2.0), (3, 1.5, 0.3, 3.0)])
def test_farfield_correction_is_exact_for_balls(d, p, r, R):
    assert farfield_correction(ball_capacity(d, p, r, R), d, p, R) == pytest.approx(
        ball_capacity(d, p, r), rel=1e-12)


def test_comparison_function_value():
    x = np.array([[4.0, 0.0, 0.0]])
    assert comparison_function(x, 3, 2.0)[0] == pytest.approx(0.5)


def test_richardson_recovers_known_order():
    h = np.array([1.0, 0.5, 0.25])
    ext, q, fb = richardson(3.0 + 0.7 * h ** 2)
    assert not fb and q == pytest.approx(2.0) and ext == pytest.approx(3.0)
    ext, q, fb = richardson([1.0, 1.2, 1.1])  # non-monotone
    assert fb and q == 1.0
    assert richardson([2.0]) == (2.0, None, True)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.integers(0, 10 ** 6))
def test_aligned_frame_is_a_rotation_onto_nu(d, seed):
    rng = np.random.default_rng(seed)
    nu = rng.standard_normal(d)
    nu /= np.linalg.norm(nu)
    Q = aligned_frame(nu)
    assert np.allclose(Q.T @ Q, np.eye(d), atol=1e-12)
    assert np.linalg.det(Q) == pytest.approx(1.0)
    assert np.allclose(Q[:, -1], nu, atol=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_aligned_frame_antipodal(d):
    nu = -np.eye(d)[-1]
    Q = aligned_frame(nu)
    assert np.allclose(Q[:, -1], nu) and np.linalg.det(Q) == pytest.approx(1.0)


def test_slices_of_ball_and_cube():
    ball = HoleShape.ball(3, 1.0)
    s = slice(ball, [0, 0, 1.0], 0.6)
    assert s.extent[1] == pytest.approx(0.8)
    assert s.contains(np.array([[0.79, 0.0]]))[0] and not s.contains(np.array([[0.81, 0.0]]))[0]
    assert slice(ball, [0, 0, 1.0], 1.2).is_empty
    cube = HoleShape.cube(3)
    nu = np.array([1.0, 1.0, 1.0]) / math.sqrt(3)
    lo, hi = slice_support(cube, nu)
    assert hi == pytest.approx(math.sqrt(3) / 2) and lo == pytest.approx(-hi)
    # central hexagon of the unit cube has circumradius sqrt(2)/2
    assert slice(cube, nu, 0.0).extent[1] == pytest.approx(math.sqrt(2) / 2)


def test_problem_invariants_enforced():
    S = SolidSet(HoleShape.ball(2, 1.0))
    with pytest.raises(ValueError, match="R/4"):
        CapacityProblem(2, 1.3, 3.0, S, 0.1)
    with pytest.raises(ValueError, match="feature"):
        CapacityProblem(2, 1.3, 4.0, S, 0.5)
    with pytest.raises(ValueError):
        CapacityProblem(2, 2.0, 4.0, S, 0.1)  # p = d
    assert CapacityProblem(2, 1.3, 3.0, S, 0.5, strict=False).issues()


@pytest.fixture(scope="module")
def disk_estimate():
    S = SolidSet(HoleShape.ball(2, 1.0), scale=0.5)
    return solve_capacity(CapacityProblem(2, 1.3, 4.0, S, 0.125, levels=2))


def test_disk_condenser_against_closed_form(disk_estimate):
    est = disk_estimate
    exact = ball_capacity(2, 1.3, 0.5, 4.0)
    assert est.best == pytest.approx(exact, rel=0.03)
    assert est.global_value == pytest.approx(ball_capacity(2, 1.3, 0.5), rel=0.03)
    assert len(est.history) == 2


def test_maximum_principle_and_energy_identity(disk_estimate):
    est = disk_estimate
    assert est.potential.min() >= 0.0 and est.potential.max() <= 1.0
    assert estimate_energy(est) == pytest.approx(est.value, rel=1e-10)


def test_farfield_barrier(disk_estimate):
    assert farfield_bound_check(disk_estimate) <= farfield_tolerance(disk_estimate)


def test_empty_set_has_zero_capacity():
    est = solve_capacity(CapacityProblem(3, 2.0, 2.0, EmptySet(3), 0.25, levels=1))
    assert est.value == 0.0 and "empty" in est.flags
    assert farfield_bound_check(est) <= 0.0


def test_monotone_under_inclusion_and_domain():
    small = SolidSet(HoleShape.ball(2, 1.0), scale=0.25)
    big = SolidSet(HoleShape.cube(2), scale=0.75)  # contains the small disk
    a = solve_capacity(CapacityProblem(2, 1.5, 4.0, small, 0.0625, levels=1))
    b = solve_capacity(CapacityProblem(2, 1.5, 4.0, big, 0.0625, levels=1))
    assert a.value <= b.value + 1e-8
    c = solve_capacity(CapacityProblem(2, 1.5, 2.0, small, 0.0625, levels=1))
    assert a.value <= c.value + 1e-8  # larger R, smaller condenser value


@pytest.mark.parametrize("shape,scale", [(HoleShape.ball(2, 1.0), 0.5), (HoleShape.cube(2), 1.0)])
def test_scaling_law(shape, scale):
    prob = CapacityProblem(2, 1.3, 4.0, SolidSet(shape, scale=scale), 0.125, levels=1)
    for t in (0.5, 2.0):
        assert scaling_check(prob, t) == pytest.approx(t ** 0.7, rel=0.05)


def test_planar_patch_marks_thin_slab():
    S = RotatedSet(PlanarPatch(np.array([0.0, 1.0]), 0.0, HoleShape.ball(2, 0.5)),
                   aligned_frame(np.array([0.0, 1.0])))
    pts = np.array([[0.0, 0.0], [0.4, 0.05], [0.4, 0.2], [0.6, 0.0]])
    assert S.mark(pts, 0.1).tolist() == [True, True, False, False]


def test_pullback_metric_of_zero_displacement_is_identity():
    shape = (5, 4)
    A, J = pullback_metric(np.zeros(shape + (2,)), shape, 0.1)
    assert np.allclose(A, np.eye(2)) and np.allclose(J, 1.0)


def test_mean_capacity_of_disk_is_direction_free():
    T = HoleShape.ball(2, 1.0)
    a = mean_capacity(T, np.array([0.0, 1.0]), 1.3, tol=0.05, cells_per_radius=4, levels=1)
    b = mean_capacity(T, np.array([0.6, 0.8]), 1.3, tol=0.05, cells_per_radius=4, levels=1)
    assert a.value > 0
    assert a.value == pytest.approx(b.value, rel=1e-9)  # aligned slices are identical


def test_plane_tilt_gap_vanishes_for_ball_centre():
    T = HoleShape.ball(2, 1.0)
    g = plane_tilt_gap(T, [0.0, 1.0], [0.3, 1.0], 1.3, np.zeros(2), h=0.125, levels=1)
    assert g == pytest.approx(0.0, abs=1e-9)


def test_flat_surface_cells():
    surf = plane_surface(np.array([0.0]), c=0.0)
    sieve = SieveConfig.critical(2.0 ** -3, 2, 1.3, HoleShape.ball(2, 0.5))
    # the line x_2 = 0 passes through the centers of row 0
    assert tangent_approx_gap(surf, sieve, (1, 0), levels=2) == pytest.approx(0.0, abs=1e-9)
    est = cell_capacity(surf, sieve, (1, 0), levels=1)
    assert est.scale == pytest.approx(sieve.a_eps ** 0.7)
    assert est.best > 0 and est.physical_value == pytest.approx(est.best * est.scale)


def test_curved_surface_gap_is_small_and_positive():
    surf = quadratic_surface(np.array([[1.0]]), domain_box=(np.array([-3.0]), np.array([3.0])))
    sieve = SieveConfig.critical(2.0 ** -4, 2, 1.3, HoleShape.ball(2, 0.5))
    gap = tangent_approx_gap(surf, sieve, (16, 8), levels=2)
    # a curved section differs a little from its tangent section
    assert 0 < gap < 1e-2


def test_domain_monotonicity_over_outer_radius():
    S = SolidSet(HoleShape.ball(2, 1.0), scale=0.5)
    vals = [solve_capacity(CapacityProblem(2, 1.5, R, S, 0.125, levels=1)).value for R in (4.0, 8.0, 16.0)]
    assert vals[0] >= vals[1] >= vals[2] > 0
    # the whole-space limit sits below every condenser value
    assert vals[2] >= ball_capacity(2, 1.5, 0.5) * 0.95

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sieve_homog.surface import (HoleShape, SieveConfig, cosh_surface, critical_hole_size,
                                 enumerate_hit_cells, lattice_points, plane_surface,
                                 quadratic_surface, surface_point, tangent_plane)


def parabola(half_width=3.0):
    return quadratic_surface(np.array([[1.0]]), domain_box=(np.array([-half_width]), np.array([half_width])))


def test_critical_hole_size_values():
    assert critical_hole_size(0.25, 3, 2.0) == pytest.approx(0.25 ** 1.5)
    assert critical_hole_size(2.0 ** -4, 2, 1.3) == pytest.approx(2.0 ** (-4 * 2 / 1.7))
    with pytest.raises(ValueError):
        critical_hole_size(-1.0, 2, 1.3)


def test_convexity_bounds_verified():
    for surf in (parabola(), cosh_surface(1.5),
                 quadratic_surface(np.array([[2.0, 0.3], [0.3, 1.0]]))):
        rep = surf.verify(n=100)
        assert rep["hessian_excursion"] <= 1e-12
        assert rep["gradient_fd_error"] < 1e-6


def test_rejects_nonconvex():
    with pytest.raises(ValueError):
        quadratic_surface(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_surface_point_normal():
    surf = parabola()
    pt, nu = surface_point(surf, np.array([[1.0]]))
    assert np.allclose(pt, [[1.0, 0.5]])
    assert np.allclose(nu, np.array([[-1.0, 1.0]]) / np.sqrt(2))
    P = tangent_plane(surf, np.array([1.0]))
    assert abs(P.signed_distance(np.array([[0.0, -0.5]]))[0]) < 1e-12


def test_hole_shapes():
    ball = HoleShape.ball(3, 0.5)
    assert ball.contains(np.array([[0.3, 0.3, 0.0]]))[0]
    assert not ball.contains(np.array([[0.4, 0.4, 0.0]]))[0]
    cube = HoleShape.cube(3)
    assert cube.circumradius == pytest.approx(np.sqrt(3) / 2)
    assert cube.signed_distance(np.array([[0.0, 0.0, 0.0]]))[0] == pytest.approx(-0.5)
    assert len(cube.edges()) == 12
    with pytest.raises(ValueError):
        HoleShape.ball(2, 1.5)


def test_sieve_rejects_touching_holes():
    with pytest.raises(ValueError, match="touch"):
        SieveConfig(0.1, 0.05, 2, 1.3)
    SieveConfig(0.1, 0.049, 2, 1.3)


def test_lattice_points_half_open():
    pts = lattice_points(0.5, np.array([0.0]), np.array([1.0]))
    assert pts.ravel().tolist() == [0, 1]
    pts = lattice_points(0.25, np.array([0.0, 0.0]), np.array([0.5, 0.5]))
    assert len(pts) == 4
    assert pts.tolist() == sorted(pts.tolist())


def _brute_force_hits(surf, sieve, lo, hi, spacing):
    x = np.arange(lo, hi, spacing)[:, None]
    pts = np.column_stack([x, surf.g(x)])
    inside = sieve.in_sieve(pts)
    return set(map(tuple, sieve.nearest_cell(pts[inside]).tolist()))


@pytest.mark.parametrize("p, radius", [(1.3, 0.5), (1.5, 0.3)])
def test_hit_enumeration_matches_dense_sampling(p, radius):
    surf = parabola()
    sieve = SieveConfig.critical(2.0 ** -5, 2, p, HoleShape.ball(2, radius))
    hits = enumerate_hit_cells(surf, sieve, np.array([0.0]), np.array([1.0]))
    found = {h.k for h in hits}
    eps = sieve.eps
    dense = _brute_force_hits(surf, sieve, -eps / 2, 1.0 - eps / 2, 2e-6)
    assert found == dense
    for h in hits:
        w = h.witness
        assert abs(w[1] - surf.g(w[None, :1])[0]) < 1e-12
        assert sieve.hole.contains(((w - sieve.hole_center(h.k)) / sieve.a_eps)[None], tol=1e-9)[0]


def test_flat_plane_hits_3d():
    surf = plane_surface(np.array([np.sqrt(2) - 1, np.sqrt(3) - 1.5]), c=0.1)
    sieve = SieveConfig.critical(2.0 ** -4, 3, 2.0, HoleShape.ball(3, 0.5))
    hits = enumerate_hit_cells(surf, sieve, np.zeros(2), 0.5 * np.ones(2))
    assert len(hits) > 0
    nu = np.array([-(np.sqrt(2) - 1), -(np.sqrt(3) - 1.5), 1.0])
    nu /= np.linalg.norm(nu)
    # a plane meets ball k iff its distance to the center is at most the radius
    for k in lattice_points(sieve.eps, np.zeros(2), 0.5 * np.ones(2)):
        for kd in range(-3, 8):
            c = sieve.eps * np.append(k, kd)
            dist = abs(nu @ c - nu[-1] * 0.1)
            hit = tuple(np.append(k, kd).tolist()) in {h.k for h in hits}
            if dist < 0.5 * sieve.a_eps * (1 - 1e-9):
                assert hit
            elif dist > 0.5 * sieve.a_eps * (1 + 1e-9):
                assert not hit


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 2.0), st.floats(-1.0, 1.0))
def test_witnesses_lie_on_surface_and_in_hole(curv, shift):
    surf = quadratic_surface(np.array([[curv]]), c=shift,
                             domain_box=(np.array([-2.0]), np.array([2.0])))
    sieve = SieveConfig.critical(2.0 ** -4, 2, 1.3, HoleShape.cube(2, 0.6))
    for h in enumerate_hit_cells(surf, sieve, np.array([-0.5]), np.array([0.5])):
        z = (h.witness - sieve.hole_center(h.k)) / sieve.a_eps
        assert sieve.hole.signed_distance(z[None])[0] <= 1e-9

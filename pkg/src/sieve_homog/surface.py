"""Convex graph surfaces, hole templates and the periodic sieve.

The surface is the graph ``x_d = g(x')`` over an axis-aligned box in
``R^{d-1}``.  The sieve is the lattice of holes ``eps*k + a_eps*T`` with
``k`` in ``Z^d``.  Everything here is immutable once built.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import ConvexHull

__all__ = [
    "ConvexSurface",
    "HoleShape",
    "SieveConfig",
    "Plane",
    "HitCell",
    "critical_hole_size",
    "quadratic_surface",
    "cosh_surface",
    "plane_surface",
    "surface_point",
    "tangent_plane",
    "lattice_points",
    "enumerate_hit_cells",
]


def critical_hole_size(eps: float, d: int, p: float) -> float:
    """Return the critical hole size ``eps**(d / (d - p + 1))``."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if int(d) != d or d < 2:
        raise ValueError(f"d must be an integer >= 2, got {d}")
    if not 1 < p < d:
        raise ValueError(f"p must lie in (1, d) = (1, {d}), got {p}")
    return float(eps ** (d / (d - p + 1.0)))


# ---------------------------------------------------------------------------
# surfaces


@dataclass(frozen=True, eq=False)
class ConvexSurface:
    """Graph ``x_d = g(x')`` with analytic derivatives.

    ``g``, ``grad_g`` and ``hess_g`` accept arrays of shape ``(..., d-1)``
    and return shapes ``(...)``, ``(..., d-1)`` and ``(..., d-1, d-1)``.
    ``c0`` and ``C0`` bound the Hessian eigenvalues on ``domain_box``.
    Flat test fixtures set ``check_convexity=False`` and ``c0 = 0``.
    """

    dim: int
    g: Callable[[np.ndarray], np.ndarray]
    grad_g: Callable[[np.ndarray], np.ndarray]
    hess_g: Callable[[np.ndarray], np.ndarray]
    c0: float
    C0: float
    domain_box: tuple[np.ndarray, np.ndarray]
    check_convexity: bool = True
    name: str = "surface"

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 2:
            raise ValueError(f"dim must be an integer >= 2, got {self.dim}")
        low, high = (np.asarray(b, dtype=float).reshape(-1) for b in self.domain_box)
        if low.shape != (self.dim - 1,) or high.shape != (self.dim - 1,):
            raise ValueError("domain_box must hold two points of R^{d-1}")
        if np.any(high <= low):
            raise ValueError("domain_box must have positive extent")
        object.__setattr__(self, "domain_box", (low, high))
        if self.check_convexity:
            if not 0 < self.c0 <= self.C0:
                raise ValueError(f"need 0 < c0 <= C0, got c0={self.c0}, C0={self.C0}")
        elif not 0 <= self.c0 <= self.C0:
            raise ValueError(f"need 0 <= c0 <= C0, got c0={self.c0}, C0={self.C0}")

    def in_domain(self, xp) -> np.ndarray:
        xp = np.asarray(xp, dtype=float)
        low, high = self.domain_box
        return np.all((xp >= low) & (xp <= high), axis=-1)

    def sample(self, n: int, seed=0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        low, high = self.domain_box
        return low + (high - low) * rng.random((n, self.dim - 1))

    def verify(self, n: int = 200, seed=0, fd_step: float = 1e-4) -> dict:
        """Check the Hessian bounds and the analytic gradient on random points.

        Returns the worst eigenvalue excursion outside ``[c0, C0]`` and the
        worst deviation between ``grad_g`` and central differences of ``g``.
        """
        xs = self.sample(n, seed)
        eig = np.linalg.eigvalsh(self.hess_g(xs))
        excursion = float(max(np.max(self.c0 - eig), np.max(eig - self.C0), 0.0))
        fd = np.empty_like(xs)
        for i in range(self.dim - 1):
            e = np.zeros(self.dim - 1)
            e[i] = fd_step
            fd[:, i] = (self.g(xs + e) - self.g(xs - e)) / (2 * fd_step)
        grad_err = float(np.max(np.abs(fd - self.grad_g(xs))))
        return {"hessian_excursion": excursion, "gradient_fd_error": grad_err}


def _default_box(m: int, half_width: float) -> tuple[np.ndarray, np.ndarray]:
    return -half_width * np.ones(m), half_width * np.ones(m)


def quadratic_surface(A, b=None, c: float = 0.0, domain_box=None, name="quadratic") -> ConvexSurface:
    """``g(x') = 0.5 x'^T A x' + b.x' + c`` with spectral bounds from ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    m = A.shape[0]
    if A.shape != (m, m) or not np.allclose(A, A.T):
        raise ValueError("A must be a symmetric square matrix")
    b = np.zeros(m) if b is None else np.asarray(b, dtype=float).reshape(m)
    eig = np.linalg.eigvalsh(A)
    if domain_box is None:
        domain_box = _default_box(m, 4.0)

    def g(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, A, x) + x @ b + c

    def grad_g(x):
        x = np.asarray(x, dtype=float)
        return x @ A + b

    def hess_g(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(A, x.shape[:-1] + (m, m)).copy()

    return ConvexSurface(m + 1, g, grad_g, hess_g, float(eig[0]), float(eig[-1]),
                         domain_box, name=name)


def cosh_surface(half_width: float = 2.0) -> ConvexSurface:
    """The curve ``x_2 = cosh(x_1)`` on ``[-half_width, half_width]``."""

    def g(x):
        return np.cosh(np.asarray(x, dtype=float)[..., 0])

    def grad_g(x):
        return np.sinh(np.asarray(x, dtype=float))

    def hess_g(x):
        return np.cosh(np.asarray(x, dtype=float))[..., None]

    return ConvexSurface(2, g, grad_g, hess_g, 1.0, float(np.cosh(half_width)),
                         _default_box(1, half_width), name="cosh")


def plane_surface(slope, c: float = 0.0, domain_box=None, name="plane") -> ConvexSurface:
    """Flat fixture ``g(x') = slope.x' + c``; the convexity check is disabled."""
    slope = np.atleast_1d(np.asarray(slope, dtype=float))
    m = slope.shape[0]
    if domain_box is None:
        domain_box = _default_box(m, 4.0)

    def g(x):
        return np.asarray(x, dtype=float) @ slope + c

    def grad_g(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(slope, x.shape).copy()

    def hess_g(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (m, m))

    return ConvexSurface(m + 1, g, grad_g, hess_g, 0.0, 0.0, domain_box,
                         check_convexity=False, name=name)


@dataclass(frozen=True, eq=False)
class Plane:
    """Affine hyperplane through ``point`` with unit ``normal``."""

    point: np.ndarray
    normal: np.ndarray

    def signed_distance(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.point) @ self.normal

    def height(self, yp) -> np.ndarray:
        """Last coordinate of the plane above ``yp`` (needs ``normal[-1] != 0``)."""
        yp = np.asarray(yp, dtype=float)
        nu = self.normal
        return self.point[-1] - (yp - self.point[:-1]) @ nu[:-1] / nu[-1]


def _check_in_domain(surface: ConvexSurface, xp):
    if not np.all(surface.in_domain(xp)):
        raise ValueError(f"x' = {np.asarray(xp).tolist()} lies outside the surface domain box")


def surface_point(surface: ConvexSurface, xp) -> tuple[np.ndarray, np.ndarray]:
    """Point ``(x', g(x'))`` of the surface and its upward unit normal."""
    xp = np.asarray(xp, dtype=float).reshape(surface.dim - 1)
    _check_in_domain(surface, xp)
    point = np.append(xp, surface.g(xp))
    n = np.append(-surface.grad_g(xp), 1.0)
    return point, n / np.linalg.norm(n)


def tangent_plane(surface: ConvexSurface, xp) -> Plane:
    point, normal = surface_point(surface, xp)
    return Plane(point, normal)


# ---------------------------------------------------------------------------
# hole templates


@dataclass(frozen=True, eq=False)
class HoleShape:
    """Compact convex template ``T`` inside the closed unit ball.

    Build with :meth:`ball`, :meth:`box`, :meth:`cube` or :meth:`polytope`.
    """

    kind: str
    dim: int
    radius: float = 0.0
    half_widths: np.ndarray | None = None
    vertices: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("ball", "box", "polytope"):
            raise ValueError(f"unknown hole kind {self.kind!r}")
        if self.kind == "ball":
            if not 0 < self.radius <= 1:
                raise ValueError(f"ball radius must lie in (0, 1], got {self.radius}")
            return
        if self.kind == "box":
            w = np.asarray(self.half_widths, dtype=float).reshape(self.dim)
            if np.any(w < 0):
                raise ValueError("box half widths must be nonnegative")
            corners = np.array(list(itertools.product(*[(-wi, wi) for wi in w])))
            object.__setattr__(self, "half_widths", w)
            object.__setattr__(self, "vertices", corners)
        else:
            v = np.asarray(self.vertices, dtype=float)
            if v.ndim != 2 or v.shape[1] != self.dim or v.shape[0] < self.dim + 1:
                raise ValueError("polytope needs at least d+1 vertices in R^d")
            hull = ConvexHull(v)
            object.__setattr__(self, "vertices", v[hull.vertices])
            object.__setattr__(self, "_equations", hull.equations)
            object.__setattr__(self, "_simplices", hull.simplices)
            object.__setattr__(self, "_hull_points", v)
        if self.circumradius > 1 + 1e-12:
            raise ValueError("hole template must lie in the closed unit ball")

    @classmethod
    def ball(cls, dim: int, radius: float = 1.0) -> "HoleShape":
        return cls("ball", dim, radius=float(radius))

    @classmethod
    def box(cls, half_widths) -> "HoleShape":
        w = np.atleast_1d(np.asarray(half_widths, dtype=float))
        return cls("box", len(w), half_widths=w)

    @classmethod
    def cube(cls, dim: int, side: float = 1.0) -> "HoleShape":
        return cls.box(0.5 * side * np.ones(dim))

    @classmethod
    def polytope(cls, vertices) -> "HoleShape":
        v = np.asarray(vertices, dtype=float)
        return cls("polytope", v.shape[1], vertices=v)

    @property
    def circumradius(self) -> float:
        if self.kind == "ball":
            return self.radius
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))

    def contains(self, y, tol: float = 0.0) -> np.ndarray:
        return self.signed_distance(y) <= tol

    def signed_distance(self, y) -> np.ndarray:
        """Signed distance to the boundary, negative inside.

        Exact for balls and boxes.  For polytopes the largest facet residual
        is returned: exact inside, a lower bound of the distance outside.
        """
        y = np.asarray(y, dtype=float)
        if self.kind == "ball":
            return np.linalg.norm(y, axis=-1) - self.radius
        if self.kind == "box":
            q = np.abs(y) - self.half_widths
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            return outside + inside
        eq = self._equations
        return np.max(y @ eq[:, :-1].T + eq[:, -1], axis=-1)

    def support(self, u) -> np.ndarray:
        """Support function ``max_{y in T} u.y``."""
        u = np.asarray(u, dtype=float)
        if self.kind == "ball":
            return self.radius * np.linalg.norm(u, axis=-1)
        if self.kind == "box":
            return np.abs(u) @ self.half_widths
        return np.max(u @ self.vertices.T, axis=-1)

    def support_point(self, u) -> np.ndarray:
        """A maximiser of ``u.y`` over ``T``."""
        u = np.asarray(u, dtype=float)
        if self.kind == "ball":
            n = np.linalg.norm(u, axis=-1, keepdims=True)
            return self.radius * u / np.where(n > 0, n, 1.0)
        if self.kind == "box":
            return np.where(u >= 0, self.half_widths, -self.half_widths)
        return self.vertices[np.argmax(u @ self.vertices.T, axis=-1)]

    def edges(self) -> np.ndarray:
        """Segments ``(m, 2, d)`` whose union contains every edge of ``T``."""
        if self.kind == "ball":
            raise ValueError("a ball has no edges")
        if self.kind == "box":
            v = self.vertices
            diff = np.abs(v[:, None, :] - v[None, :, :]) > 0
            i, j = np.nonzero(np.triu(diff.sum(-1) == 1))
            return np.stack([v[i], v[j]], axis=1)
        pts = self._hull_points
        pairs = set()
        for s in self._simplices:
            for a, b in itertools.combinations(sorted(s), 2):
                pairs.add((a, b))
        idx = np.array(sorted(pairs))
        return np.stack([pts[idx[:, 0]], pts[idx[:, 1]]], axis=1)


# ---------------------------------------------------------------------------
# sieve


@dataclass(frozen=True, eq=False)
class SieveConfig:
    """Periodic perforation ``eps*k + a_eps*T``.

    The holes must stay inside their cells: ``a_eps * circumradius(T)`` has
    to be smaller than ``eps / 2``.
    """

    eps: float
    a_eps: float
    d: int
    p: float
    hole: HoleShape | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.a_eps > 0:
            raise ValueError(f"a_eps must be positive, got {self.a_eps}")
        if not self.p > 1:
            raise ValueError(f"p must exceed 1, got {self.p}")
        hole = self.hole if self.hole is not None else HoleShape.ball(self.d)
        if hole.dim != self.d:
            raise ValueError("hole dimension differs from d")
        object.__setattr__(self, "hole", hole)
        if not self.a_eps * hole.circumradius < self.eps / 2:
            raise ValueError(
                f"holes touch cell boundary: a_eps*r_T = {self.a_eps * hole.circumradius:.6g}"
                f" >= eps/2 = {self.eps / 2:.6g}")

    @classmethod
    def critical(cls, eps: float, d: int, p: float, hole: HoleShape | None = None) -> "SieveConfig":
        return cls(eps, critical_hole_size(eps, d, p), d, p, hole)

    def hole_center(self, k) -> np.ndarray:
        return self.eps * np.asarray(k, dtype=float)

    def nearest_cell(self, y) -> np.ndarray:
        return np.rint(np.asarray(y, dtype=float) / self.eps).astype(np.int64)

    def in_sieve(self, y) -> np.ndarray:
        """Whether points lie in some hole (only the nearest cell can hold them)."""
        y = np.asarray(y, dtype=float)
        k = self.nearest_cell(y)
        return self.hole.contains((y - self.eps * k) / self.a_eps)


@dataclass(frozen=True, eq=False)
class HitCell:
    """Lattice index ``k`` whose hole meets the surface, with a witness point."""

    k: tuple
    witness: np.ndarray


def lattice_points(eps: float, low, high) -> np.ndarray:
    """Integer ``k'`` with ``eps*k'`` in the half-open box ``[low, high)``.

    Rows are in lexicographic order.
    """
    low = np.atleast_1d(np.asarray(low, dtype=float))
    high = np.atleast_1d(np.asarray(high, dtype=float))
    axes = []
    for lo, hi in zip(low, high):
        ks = np.arange(int(np.floor(lo / eps)) - 1, int(np.ceil(hi / eps)) + 2)
        x = eps * ks
        axes.append(ks[(x >= lo) & (x < hi)])
    if any(len(a) == 0 for a in axes):
        return np.zeros((0, len(axes)), dtype=np.int64)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1).astype(np.int64)


def _psi(surface, y):
    # height above the surface; concave in y because g is convex
    return y[..., -1] - surface.g(y[..., :-1])


def _grad_psi(surface, y):
    return np.concatenate([-surface.grad_g(y[..., :-1]), np.ones(y.shape[:-1] + (1,))], axis=-1)


def _golden_max(fun, m, n_iter=40):
    # vectorised golden-section maximisation of m concave 1-D functions on [0, 1]
    invphi = (np.sqrt(5.0) - 1) / 2
    lo = np.zeros(m)
    hi = np.ones(m)
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = fun(c), fun(d)
    for _ in range(n_iter):
        left = fc > fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        c_new = hi - invphi * (hi - lo)
        d_new = lo + invphi * (hi - lo)
        c, d = c_new, d_new
        fc, fd = fun(c), fun(d)
    return 0.5 * (lo + hi)


def _confirm_hits(surface, sieve, centers, fw_iters=30, bisect_iters=80):
    """Decide which holes meet the surface; return (hit mask, witnesses)."""
    a, T = sieve.a_eps, sieve.hole
    m = len(centers)
    normal = _grad_psi(surface, centers)
    # highest and lowest template points relative to the local surface normal
    z_top = T.support_point(normal)
    z_bot = T.support_point(-normal)
    top = centers + a * z_top
    bot = centers + a * z_bot
    psi_top = _psi(surface, top)
    psi_bot = _psi(surface, bot)

    # psi is concave: Frank-Wolfe for the maximum ...
    need = psi_top < 0
    if np.any(need):
        z = z_top[need].copy()
        c = centers[need]
        for _ in range(fw_iters):
            y = c + a * z
            s = T.support_point(_grad_psi(surface, y))
            step = s - z
            gam = _golden_max(lambda t: _psi(surface, c + a * (z + t[..., None] * step)), len(z))
            z = z + gam[..., None] * step
        top[need] = c + a * z
        psi_top[need] = _psi(surface, top[need])
    # ... and linear-minimisation fixed points for the minimum (extreme points)
    need = psi_bot > 0
    if np.any(need):
        z = z_bot[need].copy()
        c = centers[need]
        for _ in range(fw_iters):
            z_new = T.support_point(-_grad_psi(surface, c + a * z))
            better = _psi(surface, c + a * z_new) <= _psi(surface, c + a * z)
            z = np.where(better[:, None], z_new, z)
        bot[need] = c + a * z
        psi_bot[need] = _psi(surface, bot[need])

    hit = (psi_top >= 0) & (psi_bot <= 0)
    witnesses = np.full((m, centers.shape[1]), np.nan)
    if np.any(hit):
        lo, hi = bot[hit], top[hit]
        for _ in range(bisect_iters):
            mid = 0.5 * (lo + hi)
            below = _psi(surface, mid) <= 0
            lo = np.where(below[:, None], mid, lo)
            hi = np.where(below[:, None], hi, mid)
        w = 0.5 * (lo + hi)
        # snap onto the graph; the vertical move is at rounding level
        w[:, -1] = surface.g(w[:, :-1])
        witnesses[hit] = w
    return hit, witnesses


def enumerate_hit_cells(surface: ConvexSurface, sieve: SieveConfig, q_low, q_high) -> list[HitCell]:
    """All cells ``k`` with ``eps*k'`` in ``[q_low, q_high)`` whose hole meets the surface.

    Candidate layers ``k_d`` come from a bracket of ``g`` over the hole's
    shadow (gradient at the lattice point plus ``C0`` curvature term), padded
    by one layer on each side.  Each candidate is then confirmed by finding
    hole points on both sides of the graph and bisecting between them; the
    resulting point of the surface inside the hole is kept as the witness.
    """
    if surface.dim != sieve.d:
        raise ValueError("surface and sieve dimensions differ")
    eps, a, T = sieve.eps, sieve.a_eps, sieve.hole
    kp = lattice_points(eps, q_low, q_high)
    if len(kp) == 0:
        return []
    cp = eps * kp
    _check_in_domain(surface, cp)
    rho = a * T.circumradius
    gc = surface.g(cp)
    slope = np.linalg.norm(surface.grad_g(cp), axis=-1)
    g_lo = gc - slope * rho
    g_hi = gc + slope * rho + 0.5 * surface.C0 * rho ** 2
    ed = np.zeros(sieve.d)
    ed[-1] = 1.0
    up, down = a * T.support(ed), a * T.support(-ed)
    kd_lo = np.floor((g_lo - up) / eps).astype(np.int64) - 1
    kd_hi = np.ceil((g_hi + down) / eps).astype(np.int64) + 1

    counts = kd_hi - kd_lo + 1
    rows = np.repeat(np.arange(len(kp)), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cand = np.concatenate([kp[rows], (kd_lo[rows] + offs)[:, None]], axis=1)
    centers = eps * cand.astype(float)
    hit, wit = _confirm_hits(surface, sieve, centers)
    cand, wit = cand[hit], wit[hit]
    order = np.lexsort(cand.T[::-1])
    return [HitCell(tuple(int(v) for v in cand[i]), wit[i]) for i in order]

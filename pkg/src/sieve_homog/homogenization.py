"""Thin obstacle problems on a perforated surface and their homogenized limit.

The perforated problem minimises

    sum_cells (|grad_h v|^2 + mu^2)^(p/2) h^d + sum_nodes f v h^d

over grid functions vanishing on the boundary of a box ``Omega`` with the
hard constraint ``v >= phi`` on the nodes lying on ``Gamma`` inside a hole.
The limit problem replaces the constraint by the penalty

    sum_facets cap_{p,nu}(T) * area * ((phi - v)_+)^p

on a facet discretisation of ``Gamma ∩ Omega``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .discrete import GridEnergy, Penalty, continuation_schedule, discrete_energy, minimize_box
from .pcapacity import GraphPatch, cell_capacity, mean_capacity
from .surface import (ConvexSurface, HoleShape, SieveConfig, critical_hole_size,
                      enumerate_hit_cells)

log = logging.getLogger(__name__)

__all__ = [
    "ObstacleProblemSpec",
    "ObstacleSolution",
    "LimitMeasureTable",
    "CorrectorEnergy",
    "ConvergenceRow",
    "box_grid",
    "corrector_energy",
    "build_limit_measure",
    "flat_table",
    "solve_perforated",
    "solve_homogenized",
    "convergence_experiment",
    "lp_distance",
    "interpolation_matrix",
]


def _zero(x):
    return np.zeros(len(x))


@dataclass(frozen=True, eq=False)
class ObstacleProblemSpec:
    """Data shared by the perforated and homogenized problems.

    Parameters
    ----------
    domain : (low, high)
        Axis-aligned box ``Omega``.
    p : float
    surface : ConvexSurface
    hole : HoleShape
        Template ``T``; holes are ``eps k + a_eps T`` with the critical ``a_eps``.
    obstacle : callable
        ``phi(x)`` on points of shape ``(n, d)``; must vanish near the boundary.
    source : callable, optional
        ``f(x)``; zero when omitted.
    hom_source : callable, optional
        Source for the limit problem; defaults to ``source``.
    grid_factor : float
        Perforated grids use ``h = a_eps / grid_factor`` (at least 4).
    tol : float
        Optimality tolerance of the minimisations.
    hole_size : callable, optional
        ``eps -> a_eps`` replacing the critical size law (e.g. for ``p >= d``
        test fixtures, where that law is undefined).
    """

    domain: tuple
    p: float
    surface: ConvexSurface
    hole: HoleShape
    obstacle: Callable
    source: Callable | None = None
    hom_source: Callable | None = None
    grid_factor: float = 8.0
    tol: float = 1e-6
    hole_size: Callable | None = None

    def __post_init__(self):
        lo, hi = (np.asarray(v, dtype=float) for v in self.domain)
        object.__setattr__(self, "domain", (lo, hi))
        if lo.shape != (self.d,) or np.any(hi <= lo):
            raise ValueError("domain must be a nondegenerate box in R^d")
        if not self.p > 1:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if self.hole.dim != self.d:
            raise ValueError("hole dimension differs from the surface dimension")
        if self.grid_factor < 4:
            raise ValueError("grid_factor must be at least 4 (h <= a_eps/4)")
        for issue in self.issues():
            warnings.warn(issue, stacklevel=2)

    @property
    def d(self) -> int:
        return self.surface.dim

    def issues(self) -> list[str]:
        out = []
        if not self.p < (self.d + 4) / 4:
            out.append(f"p = {self.p} violates 1 < p < (d+4)/4 = {(self.d + 4) / 4}; the homogenized limit is not guaranteed")
        return out

    def a_eps(self, eps: float) -> float:
        if self.hole_size is not None:
            return float(self.hole_size(eps))
        return critical_hole_size(eps, self.d, self.p)

    def sieve(self, eps: float) -> SieveConfig:
        return SieveConfig(eps, self.a_eps(eps), self.d, self.p, self.hole)

    def h_for(self, eps: float) -> float:
        return self.a_eps(eps) / self.grid_factor

    def f(self, x):
        return (self.source or _zero)(x)

    def f_hom(self, x):
        return (self.hom_source or self.source or _zero)(x)


@dataclass(frozen=True, eq=False)
class ObstacleSolution:
    u: np.ndarray
    h: float
    origin: np.ndarray
    energy: dict
    total: float
    residual: float
    iterations: int
    mu_reg: float
    marked: np.ndarray | None = None
    info: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class LimitMeasureTable:
    """Facets of ``Gamma ∩ Omega`` with the mean capacity of ``T`` along their normal."""

    centroids: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    caps: np.ndarray
    cache: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("facet weights must be positive")
        if np.any(self.caps < 0):
            raise ValueError("capacities must be nonnegative")

    def __len__(self):
        return len(self.weights)

    @property
    def total_measure(self) -> float:
        return float(np.sum(self.weights))

    @property
    def total_mass(self) -> float:
        """``sum weight * cap``, the total mass of the limit measure."""
        return float(np.sum(self.weights * self.caps))

    def scaled(self, factor: float) -> "LimitMeasureTable":
        return LimitMeasureTable(self.centroids, self.normals, self.weights, factor * self.caps, self.cache)


@dataclass(frozen=True)
class CorrectorEnergy:
    total: float
    rows: tuple  # (k, unit value, physical value)
    area: float

    @property
    def density(self) -> float:
        """Total per unit tangential area of the box."""
        return self.total / self.area


@dataclass(frozen=True)
class ConvergenceRow:
    epsilon: float
    a_eps: float
    lp_distance: float
    energy_perforated: float
    energy_hom: float
    n_hit_cells: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# grids


def box_grid(domain, h: float):
    """Nodes of a uniform grid on the box; ``h`` is adjusted to divide the edges.

    Returns ``(points, shape, origin, h_eff)``.
    """
    lo, hi = (np.asarray(v, dtype=float) for v in domain)
    L = hi - lo
    n = int(math.ceil(np.max(L) / h - 1e-9))
    h_eff = float(np.max(L)) / n
    counts = np.rint(L / h_eff).astype(int)
    if np.any(np.abs(counts * h_eff - L) > 1e-9 * np.max(L)):
        raise ValueError("box edges are not commensurate with the grid spacing")
    axes = [lo[a] + h_eff * np.arange(counts[a] + 1) for a in range(len(L))]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(L))
    return pts, tuple(int(c) + 1 for c in counts), lo, h_eff


def _boundary_mask(shape):
    idx = np.indices(shape).reshape(len(shape), -1)
    out = np.zeros(idx.shape[1], dtype=bool)
    for a, n in enumerate(shape):
        out |= (idx[a] == 0) | (idx[a] == n - 1)
    return out


def interpolation_matrix(points, shape, origin, h) -> sp.csr_matrix:
    """Multilinear interpolation from grid nodes to ``points`` (rows)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m, d = points.shape
    s = (points - origin) / h
    i0 = np.clip(np.floor(s).astype(int), 0, np.array(shape) - 2)
    frac = s - i0
    rows, cols, vals = [], [], []
    for corner in np.ndindex(*(2,) * d):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, frac, 1 - frac), axis=1)
        idx = np.ravel_multi_index((i0 + c).T, shape)
        rows.append(np.arange(m))
        cols.append(idx)
        vals.append(w)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(m, int(np.prod(shape))))


def _project(surface: ConvexSurface, pts):
    patch = GraphPatch(surface.g, surface.grad_g, surface.hess_g, HoleShape.ball(surface.dim))
    return patch.project(pts)


def _marked_nodes(spec: ObstacleProblemSpec, sieve: SieveConfig, pts, h):
    """Nodes within ``h/2`` of ``Gamma`` whose nearest surface point lies in a hole."""
    surf = spec.surface
    lo, hi = surf.domain_box
    inside = np.all((pts[:, :-1] >= lo) & (pts[:, :-1] <= hi), axis=1)
    cand = np.flatnonzero(inside)
    slope = np.linalg.norm(surf.grad_g(pts[cand, :-1]), axis=1)
    near = np.abs(pts[cand, -1] - surf.g(pts[cand, :-1])) <= 0.5 * h * (np.sqrt(1 + slope ** 2) + 1)
    cand = cand[near]
    q = _project(surf, pts[cand])
    ok = (np.linalg.norm(pts[cand] - q, axis=1) <= h / 2) & sieve.in_sieve(q)
    out = np.zeros(len(pts), dtype=bool)
    out[cand[ok]] = True
    return out


def _minimize(make_energy, x0, lower, upper, h, p, tol):
    """p = 2 solve, then continuation for ``p != 2``; returns (energy, result, iterations).

    ``make_energy(p, mu, stage)`` builds the energy; ``stage`` is ``None``
    for the p = 2 start and the continuation index afterwards.
    """
    E = make_energy(2.0, 0.0, None)
    res = minimize_box(E, x0, lower, upper, tol=tol, max_iter=300)
    its = res.iterations
    if p != 2:
        for k, mu in enumerate(continuation_schedule(h)):
            E = make_energy(p, mu, k)
            res = minimize_box(E, res.x, lower, upper, tol=tol, max_iter=300)
            its += res.iterations
    return E, res, its


# ---------------------------------------------------------------------------
# solvers


def solve_perforated(spec: ObstacleProblemSpec, eps: float, h: float | None = None) -> ObstacleSolution:
    """Minimiser with ``v >= phi`` imposed exactly on nodes of ``Gamma_eps``."""
    sieve = spec.sieve(eps)
    h = spec.h_for(eps) if h is None else h
    pts, shape, origin, h = box_grid(spec.domain, h)
    bnd = _boundary_mask(shape)
    marked = _marked_nodes(spec, sieve, pts, h) & ~bnd
    phi = np.asarray(spec.obstacle(pts), dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("obstacle must be finite")
    edge = _marked_nodes(spec, sieve, pts, h) & bnd
    if np.any(phi[edge] > 0):
        raise ValueError("obstacle is positive on a hole node of the boundary")
    f = np.asarray(spec.f(pts), dtype=float)
    zeros = np.zeros(len(pts))

    def make(p, mu, stage):
        return GridEnergy(shape, h, p, bnd, zeros, source=f, mu=mu)

    E0 = make(2.0, 0.0, None)
    lower = np.full(E0.n_free, -np.inf)
    lower[marked[E0.free_index]] = phi[E0.free_index][marked[E0.free_index]]
    x0 = np.clip(np.zeros(E0.n_free), lower, np.inf)
    E, res, its = _minimize(make, x0, lower, np.inf, h, spec.p, spec.tol)
    parts = E.parts(res.x)
    u = E.field(res.x)
    return ObstacleSolution(u, h, origin, parts, sum(parts.values()), res.residual, its, E.mu,
                            marked.reshape(shape), {"n_marked": int(marked.sum()), "eps": eps})


def solve_homogenized(spec: ObstacleProblemSpec, table: LimitMeasureTable, h: float) -> ObstacleSolution:
    """Minimiser of gradient + source + facet penalty (no hard constraint).

    The penalty is smoothed as ``(gap^2 + sigma^2)^(p/2) - sigma^p`` with
    ``sigma`` continued alongside ``mu`` (1e-2, 1e-4, 1e-6 times the obstacle
    size); the p = 2 start uses the quadratic penalty.
    """
    pts, shape, origin, h = box_grid(spec.domain, h)
    bnd = _boundary_mask(shape)
    f = np.asarray(spec.f_hom(pts), dtype=float)
    zeros = np.zeros(len(pts))
    P = target = None
    if len(table):
        P = interpolation_matrix(table.centroids, shape, origin, h)
        target = np.asarray(spec.obstacle(table.centroids), dtype=float)
        scale = max(float(np.max(np.abs(target))), 1e-300)
    sigmas = tuple(c * scale for c in (1e-2, 1e-4, 1e-6)) if P is not None else ()

    def make(p, mu, stage):
        pen = None
        if P is not None:
            pen = Penalty(P, table.weights * table.caps, target, p, 0.0 if stage is None else sigmas[stage])
        return GridEnergy(shape, h, p, bnd, zeros, source=f, penalty=pen, mu=mu)

    E0 = make(2.0, 0.0, None)
    E, res, its = _minimize(make, np.zeros(E0.n_free), -np.inf, np.inf, h, spec.p, spec.tol)
    parts = E.parts(res.x)
    return ObstacleSolution(E.field(res.x), h, origin, parts, sum(parts.values()), res.residual,
                            its, E.mu, None, {"n_facets": len(table),
                                              "sigma": E.penalty.sigma if E.penalty else 0.0})


def lp_distance(a: ObstacleSolution, b: ObstacleSolution, p: float) -> float:
    """``(sum |u_a - u_b|^p h^d)^(1/p)`` for solutions on the same grid."""
    if a.u.shape != b.u.shape or abs(a.h - b.h) > 1e-14:
        raise ValueError("solutions live on different grids")
    d = a.u.ndim
    return float((np.sum(np.abs(a.u - b.u) ** p) * a.h ** d) ** (1 / p))


def solution_energy(sol: ObstacleSolution, spec: ObstacleProblemSpec, p: float | None = None,
                    table: LimitMeasureTable | None = None, hom: bool = False) -> dict:
    """Energy parts re-evaluated from the field alone (independent of the solver)."""
    p = spec.p if p is None else p
    u = sol.u
    pts = sol.origin + sol.h * np.stack(np.meshgrid(*[np.arange(n) for n in u.shape], indexing="ij"),
                                        axis=-1).reshape(-1, u.ndim)
    f = spec.f_hom(pts) if hom else spec.f(pts)
    out = {"gradient": discrete_energy(u, sol.h, p, sol.mu_reg),
           "source": float(np.sum(f * u.reshape(-1)) * sol.h ** u.ndim),
           "penalty": 0.0}
    if table is not None and len(table):
        vals = interpolation_matrix(table.centroids, u.shape, sol.origin, sol.h) @ u.reshape(-1)
        gap = np.maximum(spec.obstacle(table.centroids) - vals, 0.0)
        sg = sol.info.get("sigma", 0.0)
        term = np.where(gap > 0, (gap * gap + sg * sg) ** (p / 2) - sg ** p, 0.0)
        out["penalty"] = float(np.sum(table.weights * table.caps * term))
    return out


# ---------------------------------------------------------------------------
# correctors and the limit measure


def corrector_energy(surface: ConvexSurface, sieve: SieveConfig, q_low, q_high, *,
                     levels: int = 2, h: float | None = None, farfield: bool = True) -> CorrectorEnergy:
    """Sum of cell capacities (physical units) over hit cells with ``eps k'`` in ``[q_low, q_high)``.

    With ``farfield`` each cell value is the far-field corrected whole-space
    capacity of the rescaled hole; otherwise the finite cell condenser value.
    """
    q_low = np.atleast_1d(np.asarray(q_low, dtype=float))
    q_high = np.atleast_1d(np.asarray(q_high, dtype=float))
    rows = []
    total = 0.0
    for hc in enumerate_hit_cells(surface, sieve, q_low, q_high):
        est = cell_capacity(surface, sieve, hc.k, hit=hc, levels=levels, h=h)
        unit = est.global_value if farfield else est.best
        rows.append((hc.k, unit, unit * est.scale))
        total += unit * est.scale
    return CorrectorEnergy(float(total), tuple(rows), float(np.prod(q_high - q_low)))


def _surface_facets(surface: ConvexSurface, domain, mesh_size: float, delta: float):
    lo, hi = (np.asarray(v, dtype=float) for v in domain)
    m = surface.dim - 1
    box_lo = np.maximum(lo[:-1], surface.domain_box[0])
    box_hi = np.minimum(hi[:-1], surface.domain_box[1])
    # parameter spacing: facet diameter <= mesh_size and normal variation <= delta
    grads = surface.grad_g(surface.sample(400))
    smax = float(np.max(np.linalg.norm(grads, axis=-1)))
    dx = min(mesh_size / math.sqrt(1 + smax ** 2), delta / max(surface.C0 * math.sqrt(m), 1e-300))
    counts = np.maximum(np.ceil((box_hi - box_lo) / dx).astype(int), 1)
    axes = [box_lo[a] + (np.arange(counts[a]) + 0.5) * (box_hi[a] - box_lo[a]) / counts[a]
            for a in range(m)]
    cell = np.prod((box_hi - box_lo) / counts)
    xp = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m)
    g = surface.g(xp)
    keep = (g > lo[-1]) & (g < hi[-1])
    xp, g = xp[keep], g[keep]
    grad = surface.grad_g(xp)
    jac = np.sqrt(1 + np.sum(grad * grad, axis=1))
    normals = np.column_stack([-grad, np.ones(len(xp))]) / jac[:, None]
    return np.column_stack([xp, g]), normals, cell * jac


def _quantize(nu, step):
    key = tuple(int(v) for v in np.rint(nu / step))
    rep = np.array(key, dtype=float)
    return key, rep / np.linalg.norm(rep)


def build_limit_measure(surface: ConvexSurface, T: HoleShape, p: float, domain,
                        mesh_size: float, delta: float = 0.1, cache: dict | None = None,
                        **cap_kwargs) -> LimitMeasureTable:
    """Facet table of ``cap_{p,nu(x)}(T) dH^{d-1}`` on ``Gamma ∩ Omega``.

    Facets are centred parameter cells of the graph (diameter at most
    ``mesh_size``, normal variation at most ``delta``), kept when their
    centroid lies inside the open box.  Capacities are computed once per
    normal quantized with step ``delta/4`` and shared via ``cache``.
    """
    cents, normals, weights = _surface_facets(surface, domain, mesh_size, delta)
    if len(cents) == 0:
        raise ValueError("the surface does not meet the domain")
    cache = {} if cache is None else cache
    caps = np.empty(len(cents))
    step = delta / 4
    for i, nu in enumerate(normals):
        if T.kind == "ball":
            # rotation invariant: one direction serves every facet
            key, rep = ("ball",), np.eye(len(nu))[-1]
        else:
            key, rep = _quantize(nu, step)
        if key not in cache:
            cache[key] = mean_capacity(T, rep, p, **cap_kwargs).value
        caps[i] = cache[key]
    return LimitMeasureTable(cents, normals, weights, caps, cache)


def flat_table(table: LimitMeasureTable, height: float | None = None) -> LimitMeasureTable:
    """Ablation: the same total measure carried by a horizontal segment/plane.

    Facets keep their tangential positions, capacities and weights but are
    moved to the mean height (or ``height``) with upward normals.
    """
    c = table.centroids.copy()
    c[:, -1] = np.average(c[:, -1], weights=table.weights) if height is None else height
    n = np.zeros_like(table.normals)
    n[:, -1] = 1.0
    return LimitMeasureTable(c, n, table.weights.copy(), table.caps.copy(), table.cache)


# ---------------------------------------------------------------------------
# experiment


def _count_hits(spec: ObstacleProblemSpec, sieve: SieveConfig) -> int:
    lo, hi = spec.domain
    hits = enumerate_hit_cells(spec.surface, sieve, np.maximum(lo[:-1], spec.surface.domain_box[0]),
                               np.minimum(hi[:-1], spec.surface.domain_box[1]))
    n = 0
    for hc in hits:
        c = sieve.hole_center(hc.k)
        n += bool(np.all((c > lo) & (c < hi)))
    return n


def convergence_experiment(spec: ObstacleProblemSpec, eps_list, table: LimitMeasureTable,
                           return_solutions: bool = False):
    """One row per ``eps``: distance and energies of the perforated and limit solutions.

    Both problems are solved on the same grid (``h = a_eps / grid_factor``),
    so the distance is a plain nodal ``L^p`` norm.
    """
    eps_list = list(eps_list)
    if len(eps_list) < 3:
        raise ValueError("need at least three values of eps")
    rows, sols = [], []
    for eps in eps_list:
        h = spec.h_for(eps)
        u_eps = solve_perforated(spec, eps, h)
        u_hom = solve_homogenized(spec, table, h)
        row = ConvergenceRow(float(eps), spec.a_eps(eps), lp_distance(u_eps, u_hom, spec.p),
                             u_eps.total, u_hom.total, _count_hits(spec, spec.sieve(eps)))
        log.info("eps=%g: %s", eps, row)
        rows.append(row)
        sols.append((u_eps, u_hom))
    return (rows, sols) if return_solutions else rows

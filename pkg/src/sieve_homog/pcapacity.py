"""Variational p-capacities of compact sets on uniform grids.

A condenser problem minimises the discrete p-Dirichlet energy over grid
functions equal to 1 on the nodes marked by a set ``S`` and 0 on nodes with
``|x| >= R``.  Values are computed on a short refinement sequence
``h, h/2, h/4`` and Richardson-extrapolated.  The condenser value is then
converted to the whole-space capacity with the exact radial correction

    C_inf^(-1/(p-1)) = C_R^(-1/(p-1)) + kappa * R^gamma,

``gamma = (p-d)/(p-1)``, which is exact for balls and accurate to
``O((diam S / R)^2)`` for other sets.
"""

from __future__ import annotations

import builtins
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .discrete import (GridEnergy, SolverError, continuation_schedule, discrete_energy,
                       minimize_box)
from .surface import ConvexSurface, HoleShape, SieveConfig, enumerate_hit_cells

log = logging.getLogger(__name__)

__all__ = [
    "sphere_area",
    "ball_capacity",
    "farfield_correction",
    "comparison_function",
    "richardson",
    "CondenserSet",
    "EmptySet",
    "SolidSet",
    "PlanarPatch",
    "GraphPatch",
    "RotatedSet",
    "aligned_frame",
    "slice_capacity",
    "PlaneSlice",
    "CapacityProblem",
    "CapacityEstimate",
    "MeanCapacity",
    "QuadratureError",
    "solve_capacity",
    "scaling_check",
    "slice",
    "slice_support",
    "mean_capacity",
    "cell_capacity",
    "tangent_approx_gap",
    "TangentBending",
    "pullback_metric",
    "plane_tilt_gap",
    "farfield_bound_check",
    "farfield_tolerance",
    "estimate_energy",
]


# ---------------------------------------------------------------------------
# radial formulas


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in ``R^d``."""
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def ball_capacity(d: int, p: float, r: float, R: float = math.inf) -> float:
    """p-capacity of the ball ``B_r`` relative to ``B_R`` (whole space if ``R = inf``)."""
    if not 1 < p < d:
        raise ValueError(f"need 1 < p < d, got p={p}, d={d}")
    gam = (p - d) / (p - 1)
    R_term = 0.0 if math.isinf(R) else R ** gam
    return sphere_area(d) * abs(gam) ** (p - 1) / abs(r ** gam - R_term) ** (p - 1)


def farfield_correction(value: float, d: int, p: float, R: float) -> float:
    """Whole-space capacity from a condenser value in ``B_R``."""
    if value <= 0:
        return 0.0
    gam = (p - d) / (p - 1)
    kappa = (sphere_area(d) * abs(gam) ** (p - 1)) ** (-1 / (p - 1))
    return (value ** (-1 / (p - 1)) + kappa * R ** gam) ** (-(p - 1))


def comparison_function(x, d: int, p: float) -> np.ndarray:
    """Radial barrier ``W(x) = |x/2|^((p-d)/(p-1))``."""
    r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    with np.errstate(divide="ignore"):
        return (r / 2) ** ((p - d) / (p - 1))


def richardson(values, ratio: float = 2.0) -> tuple[float, float | None, bool]:
    """Extrapolate values computed at ``h, h/ratio, h/ratio^2, ...``.

    With three or more values the order is estimated from the last three.
    If the estimate is unusable (non-monotone or outside ``(0.3, 4)``) the
    extrapolation assumes first order and the returned flag is ``True``.

    Returns ``(extrapolated, order, fallback)``.
    """
    v = [float(x) for x in values]
    if len(v) == 1:
        return v[0], None, True
    if len(v) >= 3:
        d1, d2 = v[-3] - v[-2], v[-2] - v[-1]
        if d2 != 0 and d1 / d2 > 1:
            q = math.log(d1 / d2) / math.log(ratio)
            if 0.3 < q < 4:
                return v[-1] - d2 / (ratio ** q - 1), q, False
    return v[-1] + (v[-1] - v[-2]) / (ratio - 1), 1.0, True


# ---------------------------------------------------------------------------
# condenser sets


class CondenserSet:
    """Compact set marked on a grid by a thickened membership test.

    Subclasses provide ``dim``, ``radius`` (bound on ``|x|`` over the set),
    ``feature_size`` and ``mark(points, tol)`` which flags points within
    ``tol`` of the set.
    """

    dim: int
    radius: float
    feature_size: float

    def mark(self, points: np.ndarray, tol: float) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def scaled(self, t: float) -> "CondenserSet":  # pragma: no cover
        raise NotImplementedError

    @property
    def is_empty(self) -> bool:
        return False


@dataclass(frozen=True)
class EmptySet(CondenserSet):
    dim: int

    radius = 0.0
    feature_size = math.inf

    def mark(self, points, tol):
        return np.zeros(len(points), dtype=bool)

    def scaled(self, t):
        return self

    @property
    def is_empty(self):
        return True


@dataclass(frozen=True, eq=False)
class SolidSet(CondenserSet):
    """``center + scale * shape``."""

    shape: HoleShape
    center: np.ndarray | None = None
    scale: float = 1.0

    def __post_init__(self):
        c = np.zeros(self.shape.dim) if self.center is None else np.asarray(self.center, float)
        object.__setattr__(self, "center", c)

    @property
    def dim(self):
        return self.shape.dim

    @property
    def radius(self):
        return float(np.linalg.norm(self.center) + self.scale * self.shape.circumradius)

    @property
    def feature_size(self):
        if self.shape.kind == "ball":
            return self.scale * self.shape.radius
        if self.shape.kind == "box":
            return self.scale * float(np.min(self.shape.half_widths))
        return self.scale * self.shape.circumradius

    def mark(self, points, tol):
        return self.shape.signed_distance((points - self.center) / self.scale) * self.scale <= tol

    def scaled(self, t):
        return SolidSet(self.shape, t * self.center, t * self.scale)


def aligned_frame(nu) -> np.ndarray:
    """Rotation ``Q`` with ``Q e_d = nu``, the smallest rotation doing so.

    Its first ``d-1`` columns span the plane orthogonal to ``nu``.
    """
    nu = np.asarray(nu, dtype=float)
    d = len(nu)
    e = np.zeros(d)
    e[-1] = 1.0
    c = float(nu @ e)
    if c < -1 + 1e-12:
        # half turn; keep det = +1 in odd dimensions
        Q = -np.eye(d)
        if d % 2 == 1:
            Q[0, 0] = 1.0
        return Q
    v = nu - c * e  # rotation in the plane spanned by e and nu
    s = np.linalg.norm(v)
    if s < 1e-15:
        return np.eye(d)
    v /= s
    Q = (np.eye(d) + (c - 1) * (np.outer(e, e) + np.outer(v, v))
         + s * (np.outer(v, e) - np.outer(e, v)))
    return Q


@dataclass(frozen=True, eq=False)
class RotatedSet(CondenserSet):
    """``frame^T base``: grid point ``u`` belongs when ``frame @ u`` is in ``base``.

    Capacity is rotation invariant, so a codimension-1 set can be solved on
    a grid aligned with its plane.
    """

    base: CondenserSet
    frame: np.ndarray

    @property
    def dim(self):
        return self.base.dim

    @property
    def radius(self):
        return self.base.radius

    @property
    def feature_size(self):
        return self.base.feature_size

    @property
    def is_empty(self):
        return self.base.is_empty

    def mark(self, points, tol):
        return self.base.mark(points @ self.frame.T, tol)

    def scaled(self, t):
        return RotatedSet(self.base.scaled(t), self.frame)


@dataclass(frozen=True, eq=False)
class PlanarPatch(CondenserSet):
    """``{y : nu.y = offset} ∩ (clip_center + clip_scale * clip)``.

    A point is marked when its distance to the plane is at most ``tol`` and
    its orthogonal projection onto the plane lies in the clip set.
    """

    normal: np.ndarray
    offset: float
    clip: HoleShape
    clip_center: np.ndarray | None = None
    clip_scale: float = 1.0

    def __post_init__(self):
        nu = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(nu) - 1) > 1e-12:
            raise ValueError("plane normal must be a unit vector")
        object.__setattr__(self, "normal", nu)
        c = np.zeros(len(nu)) if self.clip_center is None else np.asarray(self.clip_center, float)
        object.__setattr__(self, "clip_center", c)
        t_local = (self.offset - nu @ c) / self.clip_scale
        object.__setattr__(self, "_slice", slice(self.clip, nu, t_local))

    @property
    def dim(self):
        return len(self.normal)

    @property
    def is_empty(self):
        return self._slice.is_empty

    @property
    def radius(self):
        if self.is_empty:
            return 0.0
        ctr, rad = self._slice.extent
        return float(np.linalg.norm(self.clip_center + self.clip_scale * ctr) + self.clip_scale * rad)

    @property
    def feature_size(self):
        return 0.0 if self.is_empty else self.clip_scale * self._slice.extent[1]

    def mark(self, points, tol):
        dist = points @ self.normal - self.offset
        near = np.abs(dist) <= tol
        proj = points[near] - dist[near, None] * self.normal
        out = np.zeros(len(points), dtype=bool)
        out[near] = self.clip.contains((proj - self.clip_center) / self.clip_scale, tol=1e-10)
        return out

    def scaled(self, t):
        return PlanarPatch(self.normal, t * self.offset, self.clip, t * self.clip_center,
                           t * self.clip_scale)


@dataclass(frozen=True, eq=False)
class GraphPatch(CondenserSet):
    """``{y_d = G(y')} ∩ (clip_center + clip_scale * clip)`` for a convex graph.

    Points are marked when their Euclidean distance to the graph is at most
    ``tol`` and their nearest point on the graph lies in the clip set.  The
    nearest point is found by Newton's method on the first-order condition
    ``u - y' + (G(u) - y_d) grad G(u) = 0``.
    """

    G: object
    grad_G: object
    hess_G: object
    clip: HoleShape
    clip_center: np.ndarray | None = None
    clip_scale: float = 1.0
    size: float | None = None

    def __post_init__(self):
        c = np.zeros(self.clip.dim) if self.clip_center is None else np.asarray(self.clip_center, float)
        object.__setattr__(self, "clip_center", c)

    @property
    def dim(self):
        return self.clip.dim

    @property
    def radius(self):
        return float(np.linalg.norm(self.clip_center) + self.clip_scale * self.clip.circumradius)

    @property
    def feature_size(self):
        return self.clip_scale * self.clip.circumradius if self.size is None else self.size

    def project(self, points, n_iter: int = 30) -> np.ndarray:
        """Nearest points on the graph (full coordinates)."""
        yp, yd = points[:, :-1], points[:, -1]
        u = yp.copy()
        m = yp.shape[1]
        eye = np.eye(m)
        for _ in range(n_iter):
            Gu, gu, Hu = self.G(u), self.grad_G(u), self.hess_G(u)
            F = u - yp + (Gu - yd)[:, None] * gu
            J = eye + gu[:, :, None] * gu[:, None, :] + (Gu - yd)[:, None, None] * Hu
            step = np.linalg.solve(J, F[..., None])[..., 0]
            u = u - step
            if np.max(np.abs(step), initial=0.0) < 1e-14:
                break
        return np.column_stack([u, self.G(u)])

    def mark(self, points, tol):
        out = np.zeros(len(points), dtype=bool)
        if len(points) == 0:
            return out
        # cheap vertical pre-filter: vertical distance >= Euclidean distance
        near = np.abs(points[:, -1] - self.G(points[:, :-1])) <= tol * np.sqrt(
            1 + np.sum(self.grad_G(points[:, :-1]) ** 2, axis=1)) + tol
        q = self.project(points[near])
        dist = np.linalg.norm(points[near] - q, axis=1)
        ok = (dist <= tol) & self.clip.contains((q - self.clip_center) / self.clip_scale, tol=1e-10)
        out[near] = ok
        return out

    def scaled(self, t):
        G, gG, hG = self.G, self.grad_G, self.hess_G
        size = None if self.size is None else t * self.size
        return GraphPatch(lambda u: t * G(u / t), lambda u: gG(u / t),
                          lambda u: hG(u / t) / t, self.clip, t * self.clip_center,
                          t * self.clip_scale, size)


# ---------------------------------------------------------------------------
# plane slices


def slice_support(T: HoleShape, nu) -> tuple[float, float]:
    """Offsets ``[t_min, t_max]`` for which the plane ``nu.y = t`` meets ``T``."""
    nu = np.asarray(nu, dtype=float)
    return float(-T.support(-nu)), float(T.support(nu))


@dataclass(frozen=True, eq=False)
class PlaneSlice:
    """``T ∩ {nu.y = t}`` with membership in plane coordinates.

    Plane coordinates ``z`` map to ``t*nu + basis @ z``.
    """

    shape: HoleShape
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        nu = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(nu) - 1) > 1e-12:
            raise ValueError("slice normal must be a unit vector")
        object.__setattr__(self, "normal", nu)
        object.__setattr__(self, "basis", aligned_frame(nu)[:, :-1])
        object.__setattr__(self, "extent", self._extent())

    @property
    def support(self):
        return slice_support(self.shape, self.normal)

    @property
    def is_empty(self) -> bool:
        return self.extent is None

    def to_space(self, z) -> np.ndarray:
        return self.offset * self.normal + np.asarray(z, dtype=float) @ self.basis.T

    def contains(self, z) -> np.ndarray:
        """Membership of plane-coordinate points."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self.is_empty:
            return np.zeros(len(z), dtype=bool)
        return self.shape.contains(self.to_space(z), tol=1e-12)

    def _extent(self):
        """``(center, radius)`` of a ball in ``R^d`` containing the slice, or None if empty."""
        t_min, t_max = self.support
        t = self.offset
        tol = 1e-12
        if t < t_min - tol or t > t_max + tol:
            return None
        nu = self.normal
        if self.shape.kind == "ball":
            r2 = max(self.shape.radius ** 2 - t * t, 0.0)
            return t * nu, math.sqrt(r2)
        edges = self.shape.edges()
        sa = edges[:, 0] @ nu - t
        sb = edges[:, 1] @ nu - t
        pts = [edges[np.abs(sa) <= tol, 0], edges[np.abs(sb) <= tol, 1]]
        cross = (sa * sb < 0)
        lam = sa[cross] / (sa[cross] - sb[cross])
        pts.append(edges[cross, 0] + lam[:, None] * (edges[cross, 1] - edges[cross, 0]))
        pts = np.concatenate(pts)
        if len(pts) == 0:
            return None
        center = pts.mean(axis=0)
        center = center - (center @ nu - t) * nu
        return center, float(np.max(np.linalg.norm(pts - center, axis=1)))

    def to_set(self, recenter: bool = False, align: bool = False) -> CondenserSet:
        """The slice as a condenser set.

        ``recenter`` translates the slice center to the origin; ``align``
        rotates it so the plane becomes ``u_d = const`` on the grid.
        """
        if not recenter or self.is_empty:
            S = PlanarPatch(self.normal, self.offset, self.shape)
        else:
            ctr = self.extent[0]
            S = PlanarPatch(self.normal, self.offset - ctr @ self.normal, self.shape, -ctr)
        return RotatedSet(S, aligned_frame(self.normal)) if align else S


def slice(T: HoleShape, nu, t: float) -> PlaneSlice:  # noqa: A001
    """Cross-section of ``T`` by the plane ``nu.y = t``."""
    return PlaneSlice(T, np.asarray(nu, dtype=float), float(t))


# ---------------------------------------------------------------------------
# problems and estimates


@dataclass(frozen=True, eq=False)
class CapacityProblem:
    """Condenser problem for ``S`` inside ``B_R``.

    Parameters
    ----------
    d, p : dimension and exponent, ``1 < p < d``.
    R : outer radius; the potential vanishes on nodes with ``|x| >= R``.
    S : condenser set.
    h : coarsest grid spacing.
    mu_reg : final regularisation; ``None`` uses ``1e-6 / h`` at each level.
    levels : number of grids ``h, h/2, ...`` used for extrapolation.
    tol : optimality tolerance; defaults to 1e-8 for ``p = 2`` and 1e-6 otherwise.
    strict : raise on violated size invariants instead of flagging them.
    displacement : optional callable ``u -> Phi(u) - u`` on node coordinates.
        The marked set and the energy are pulled back through ``Phi``, so the
        problem describes the condenser ``Phi(S)``.  ``Phi`` must be a
        diffeomorphism equal to the identity near ``|x| = R``.
    """

    d: int
    p: float
    R: float
    S: CondenserSet
    h: float
    mu_reg: float | None = None
    levels: int = 3
    tol: float | None = None
    strict: bool = True
    displacement: object = None

    def __post_init__(self):
        if not 1 < self.p < self.d:
            raise ValueError(f"need 1 < p < d, got p={self.p}, d={self.d}")
        if not (self.R > 0 and self.h > 0):
            raise ValueError("R and h must be positive")
        if self.S.dim != self.d:
            raise ValueError("condenser set dimension differs from d")
        if self.mu_reg is not None and (self.mu_reg < 0 or (self.mu_reg == 0 and self.p < 2)):
            raise ValueError("mu_reg must be positive for p < 2 (and nonnegative otherwise)")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.strict:
            issues = self.issues()
            if issues:
                raise ValueError("; ".join(issues))

    def issues(self) -> list[str]:
        out = []
        if self.S.is_empty:
            return out
        if self.S.radius > self.R / 4 * (1 + 1e-12):
            out.append(f"set radius {self.S.radius:.4g} exceeds R/4 = {self.R / 4:.4g}")
        if self.h > self.S.feature_size / 4 * (1 + 1e-12):
            out.append(f"h = {self.h:.4g} exceeds feature size/4 = {self.S.feature_size / 4:.4g}")
        return out

    @property
    def tolerance(self) -> float:
        if self.tol is not None:
            return self.tol
        return 1e-8 if self.p == 2 else 1e-6

    def scaled(self, t: float) -> "CapacityProblem":
        mu = None if self.mu_reg is None else self.mu_reg / t
        disp = None
        if self.displacement is not None:
            v = self.displacement

            def disp(u):
                return t * v(u / t)
        return replace(self, R=t * self.R, S=self.S.scaled(t), h=t * self.h, mu_reg=mu,
                       displacement=disp)


def pullback_metric(disp: np.ndarray, shape, h: float):
    """Per-cell ``(DPhi^{-T}, |det DPhi|)`` from nodal displacements ``Phi(u) - u``.

    ``DPhi`` is constant per cell: differences along each axis averaged over
    the parallel cell edges.
    """
    d = len(shape)
    V = disp.reshape(tuple(shape) + (d,))
    F = np.zeros(tuple(n - 1 for n in shape) + (d, d))
    for a in range(d):
        da = np.diff(V, axis=a) / h
        for b in range(d):
            if b != a:
                lo = (builtins.slice(None),) * b + (builtins.slice(0, -1),)
                hi = (builtins.slice(None),) * b + (builtins.slice(1, None),)
                da = 0.5 * (da[lo] + da[hi])
        F[..., :, a] = da
    F = F.reshape(-1, d, d) + np.eye(d)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise ValueError("displacement does not define an orientation-preserving map")
    A = np.linalg.inv(F).transpose(0, 2, 1)
    return A, np.abs(J)


@dataclass(frozen=True, eq=False)
class CapacityEstimate:
    """Result of :func:`solve_capacity`.

    ``value`` is the discrete energy on the finest grid; ``extrapolated`` the
    Richardson value (``None`` with a single level); ``global_value`` the
    far-field corrected whole-space capacity of the best value.  ``history``
    holds one row per grid: h, mu_reg, value, residual, extrapolated.
    Physical values of rescaled cell problems are ``best * scale``.
    """

    value: float
    potential: np.ndarray
    h: float
    R: float
    origin: np.ndarray
    d: int
    p: float
    mu_reg: float
    residual: float
    history: tuple
    extrapolated: float | None
    order: float | None
    global_value: float
    n_marked: int
    flags: tuple = ()
    scale: float = 1.0
    info: dict = field(default_factory=dict)

    @property
    def best(self) -> float:
        return self.value if self.extrapolated is None else self.extrapolated

    @property
    def physical_value(self) -> float:
        return self.best * self.scale

    def node_coordinates(self) -> np.ndarray:
        axes = [self.origin[a] + self.h * np.arange(n) for a, n in enumerate(self.potential.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _grid(R: float, h: float, d: int):
    n = int(math.ceil(R / h - 1e-9))
    ax = h * np.arange(-n, n + 1)
    pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return pts, (2 * n + 1,) * d, np.full(d, -n * h)


def _solve_level(prob: CapacityProblem, h: float, method: str, x_init=None):
    d, p, R = prob.d, prob.p, prob.R
    pts, shape, origin = _grid(R, h, d)
    r = np.linalg.norm(pts, axis=1)
    outside = r >= R
    ones = np.zeros(len(pts), dtype=bool)
    if not prob.S.is_empty:
        cand = np.flatnonzero((r <= prob.S.radius + h) & ~outside)
        ones[cand] = prob.S.mark(pts[cand], h / 2)
    n_marked = int(ones.sum())
    mu_final = prob.mu_reg if prob.mu_reg is not None else continuation_schedule(h)[-1]
    if n_marked == 0:
        return dict(value=0.0, field=np.zeros(shape), residual=0.0, shape=shape, origin=origin,
                    n_marked=0, mu=mu_final, metric=None)
    fixed = ones | outside
    vals = ones.astype(float)
    tol = prob.tolerance
    metric = None
    if prob.displacement is not None:
        metric = pullback_metric(prob.displacement(pts), shape, h)
    E2 = GridEnergy(shape, h, 2.0, fixed, vals, metric=metric)
    x0 = np.zeros(E2.n_free) if x_init is None else x_init
    res = minimize_box(E2, x0, 0.0, 1.0, tol=1e-8 if p == 2 else 1e-6, method=method,
                       max_iter=200 if method == "newton" else 20000)
    E = E2
    if p != 2:
        if prob.mu_reg is None:
            mus = continuation_schedule(h)
        else:
            mus = tuple(m for m in continuation_schedule(h) if m > prob.mu_reg) + (prob.mu_reg,)
        for mu in mus:
            E = GridEnergy(shape, h, p, fixed, vals, mu=mu, metric=metric)
            res = minimize_box(E, res.x, 0.0, 1.0, tol=tol, method=method,
                               max_iter=200 if method == "newton" else 20000)
    field_ = E.field(res.x)
    return dict(value=E.parts(res.x)["gradient"], field=field_, residual=res.residual, shape=shape,
                origin=origin, n_marked=n_marked, mu=E.mu, metric=metric)


def solve_capacity(problem: CapacityProblem, method: str = "newton") -> CapacityEstimate:
    """Minimise the discrete condenser energy on ``levels`` nested grids.

    Raises :class:`~sieve_homog.discrete.SolverError` when a level fails to
    converge.  An empty marked node set gives value 0 with flag ``"empty"``.
    """
    flags = list(problem.issues())
    rows = []
    values = []
    lev = None
    for level in range(problem.levels):
        h = problem.h / 2 ** level
        lev = _solve_level(problem, h, method)
        values.append(lev["value"])
        ext = richardson(values)[0] if level > 0 else None
        rows.append({"h": h, "mu_reg": lev["mu"], "value": lev["value"],
                     "residual": lev["residual"], "extrapolated": ext})
        if lev["n_marked"] == 0:
            break
    if lev["n_marked"] == 0:
        flags.append("empty")
        extrap, order = None, None
        values = [0.0]
    else:
        for a, b in zip(values, values[1:]):
            if b > a * (1 + 1e-6) + 1e-12:
                flags.append("non-monotone refinement")
                break
        if len(values) > 1:
            extrap, order, fallback = richardson(values)
            if fallback and len(values) >= 3:
                flags.append("richardson order fallback")
            extrap = max(extrap, 0.0)
        else:
            extrap, order = None, None
    best = values[-1] if extrap is None else extrap
    return CapacityEstimate(
        value=float(values[-1]), potential=lev["field"], h=problem.h / 2 ** (len(rows) - 1),
        R=problem.R, origin=lev["origin"], d=problem.d, p=problem.p, mu_reg=lev["mu"],
        residual=float(lev["residual"]), history=tuple(rows), extrapolated=extrap, order=order,
        global_value=farfield_correction(best, problem.d, problem.p, problem.R),
        n_marked=lev["n_marked"], flags=tuple(flags),
        info={} if lev["metric"] is None else {"metric": lev["metric"]})


def estimate_energy(est: CapacityEstimate) -> float:
    """Discrete energy of the returned potential, recomputed from scratch."""
    return discrete_energy(est.potential, est.h, est.p, est.mu_reg, est.info.get("metric"))


def scaling_check(problem: CapacityProblem, t: float, method: str = "newton") -> float:
    """``cap(tS, B_tR) / cap(S, B_R)`` with the grid scaled along with the set."""
    if not t > 0:
        raise ValueError("t must be positive")
    base = solve_capacity(problem, method)
    scaled = solve_capacity(problem.scaled(t), method)
    if base.best == 0:
        return math.nan
    return scaled.best / base.best


# ---------------------------------------------------------------------------
# mean directional capacity


class QuadratureError(RuntimeError):
    def __init__(self, message, table):
        super().__init__(message)
        self.table = table


@dataclass(frozen=True)
class MeanCapacity:
    value: float
    table: tuple  # (t, slice capacity) pairs, sorted by t
    support: tuple[float, float]


def slice_capacity(T: HoleShape, nu, t: float, p: float, cells_per_radius: int = 4,
                   levels: int = 2, method: str = "newton") -> float:
    """Whole-space p-capacity of ``slice(T, nu, t)`` embedded in ``R^d``.

    The grid is centred on the slice with ``R = 4 rho`` and ``h = rho / cells_per_radius``
    where ``rho`` is the slice radius, so every slice is resolved alike.
    """
    sl = slice(T, nu, t)
    if sl.is_empty or sl.extent[1] < 1e-9:
        return 0.0
    rho = sl.extent[1]
    S = sl.to_set(recenter=True, align=True)
    prob = CapacityProblem(T.dim, p, 4 * rho * (1 + 1e-9), S, rho / cells_per_radius,
                           levels=levels, strict=False)
    return solve_capacity(prob, method).global_value


def mean_capacity(T: HoleShape, nu, p: float, tol: float = 0.02, *, cells_per_radius: int = 4,
                  levels: int = 2, min_depth: int = 2, max_depth: int = 6,
                  method: str = "newton") -> MeanCapacity:
    """``∫ cap_p(T ∩ {nu.y = t}) dt`` over the support of ``t`` by adaptive Simpson.

    ``tol`` is relative to the running estimate.  Raises
    :class:`QuadratureError` (with the evaluated table) if some interval
    still misses its share of the tolerance at ``max_depth``.
    """
    nu = np.asarray(nu, dtype=float)
    if abs(np.linalg.norm(nu) - 1) > 1e-12:
        raise ValueError("nu must be a unit vector")
    a, b = slice_support(T, nu)
    if b - a <= 1e-12:
        return MeanCapacity(0.0, (), (a, b))
    cache = {}

    def f(t):
        key = round(t, 14)
        if key not in cache:
            cache[key] = slice_capacity(T, nu, t, p, cells_per_radius, levels, method)
        return cache[key]

    def simpson(fa, fm, fb, lo, hi):
        return (hi - lo) / 6 * (fa + 4 * fm + fb)

    # coarse pass fixes the absolute tolerance
    ts = np.linspace(a, b, 5)
    fs = [f(t) for t in ts]
    coarse = simpson(fs[0], fs[2], fs[4], a, b)
    abs_tol = tol * max(abs(coarse), 1e-300)
    failed = []

    def recurse(lo, hi, flo, fmid, fhi, whole, eps, depth):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = simpson(flo, flm, fmid, lo, mid)
        right = simpson(fmid, frm, fhi, mid, hi)
        err = left + right - whole
        if depth >= min_depth and abs(err) <= 15 * eps:
            return left + right + err / 15
        if depth >= max_depth:
            failed.append((lo, hi, abs(err)))
            return left + right + err / 15
        return (recurse(lo, mid, flo, flm, fmid, left, eps / 2, depth + 1)
                + recurse(mid, hi, fmid, frm, fhi, right, eps / 2, depth + 1))

    total = (recurse(a, ts[2], fs[0], fs[1], fs[2], simpson(fs[0], fs[1], fs[2], a, ts[2]),
                     abs_tol / 2, 1)
             + recurse(ts[2], b, fs[2], fs[3], fs[4], simpson(fs[2], fs[3], fs[4], ts[2], b),
                       abs_tol / 2, 1))
    table = tuple(sorted(cache.items()))
    if failed:
        raise QuadratureError(f"adaptive Simpson missed tolerance on {len(failed)} interval(s)", table)
    return MeanCapacity(float(total), table, (a, b))


# ---------------------------------------------------------------------------
# cell problems


def _local_graph(surface: ConvexSurface, base: np.ndarray, a: float):
    """Graph of ``(Gamma - base) / a`` as functions of the rescaled tangential variable."""
    bp, bd = base[:-1], base[-1]

    def G(u):
        return (surface.g(bp + a * u) - bd) / a

    def grad_G(u):
        return surface.grad_g(bp + a * u)

    def hess_G(u):
        return a * surface.hess_g(bp + a * u)

    return G, grad_G, hess_G


def _hit_cell(surface, sieve, k):
    k = tuple(int(v) for v in k)
    c = sieve.hole_center(k)
    hits = enumerate_hit_cells(surface, sieve, c[:-1] - sieve.eps / 2, c[:-1] + sieve.eps / 2)
    for hc in hits:
        if hc.k == k:
            return hc
    raise ValueError(f"cell {k} is not hit by the surface")


def _graph_patch(surface, sieve, k, witness):
    c = sieve.hole_center(k)
    a = sieve.a_eps
    G, gG, hG = _local_graph(surface, c, a)
    zx = (witness - c) / a
    # in-plane size of the tangent section, used as the feature size
    nu = np.append(-gG(zx[None, :-1])[0], 1.0)
    nu /= np.linalg.norm(nu)
    sl = slice(sieve.hole, nu, float(nu @ zx))
    size = sl.extent[1] if not sl.is_empty else 0.0
    # solve on a grid aligned with the tangent plane
    S = RotatedSet(GraphPatch(G, gG, hG, sieve.hole, size=size), aligned_frame(nu))
    return S, zx, nu


def _central_witness(surface, sieve, k, witness):
    """Point of the surface nearest the hole center if it lies in the hole, else ``witness``."""
    c = sieve.hole_center(k)
    G, gG, hG = _local_graph(surface, c, sieve.a_eps)
    patch = GraphPatch(G, gG, hG, sieve.hole)
    z = patch.project(np.zeros((1, sieve.d)))[0]
    if sieve.hole.contains(z[None])[0]:
        return c + sieve.a_eps * z
    return np.asarray(witness, dtype=float)


def _smoothstep_cutoff(r, r1, r2):
    tau = np.clip((r - r1) / (r2 - r1), 0.0, 1.0)
    return 1 - tau * tau * (3 - 2 * tau)


class TangentBending:
    """Displacement field bending the tangent section ``P_x ∩ T`` onto ``Gamma ∩ T``.

    Works at unit scale in the frame aligned with the tangent plane, where
    the plane is ``u_d = t`` and the surface is the graph ``u_d = H(u')``.
    In-plane points are moved radially about the section center so that the
    section's boundary lands on the boundary of the projected surface piece,
    then lifted onto the surface.  A smooth radial cutoff (1 inside
    ``1.25 r_T``, 0 beyond ``2.5 r_T``) makes the map the identity far away.
    """

    def __init__(self, G, grad_G, frame, t, hole: HoleShape, n_dirs: int = 720):
        self.G, self.grad_G, self.Q, self.t, self.hole = G, grad_G, frame, float(t), hole
        d = hole.dim
        if d not in (2, 3):
            raise NotImplementedError("surface bending is implemented for d = 2, 3")
        self.d = d
        rT = hole.circumradius
        self.r1, self.r2 = 1.25 * rT, 2.5 * rT
        nu = frame[:, -1]
        sl = slice(hole, nu, t)
        if sl.is_empty:
            raise ValueError("tangent plane misses the hole")
        self.center = (frame.T @ sl.extent[0])[:-1]
        c_lift = np.append(self.center, self.height(self.center[None])[0])
        if not hole.contains((frame @ c_lift)[None])[0]:
            raise ValueError("surface piece does not cover the section center")
        if d == 2:
            self.dirs = np.array([[1.0], [-1.0]])
        else:
            ang = 2 * np.pi * np.arange(n_dirs) / n_dirs
            self.dirs = np.column_stack([np.cos(ang), np.sin(ang)])
        rho_flat = self._boundary(lambda up: np.full(len(up), self.t))
        rho_curved = self._boundary(lambda up: self.height(up))
        self.ratio = rho_curved / rho_flat

    def height(self, up, n_iter: int = 50) -> np.ndarray:
        """``H(u')``: height of the surface above the tangent plane's coordinates."""
        Q = self.Q
        s = np.full(len(up), self.t)
        base = up @ Q[:, :-1].T
        for _ in range(n_iter):
            z = base + s[:, None] * Q[:, -1]
            f = z[:, -1] - self.G(z[:, :-1])
            df = Q[-1, -1] - self.grad_G(z[:, :-1]) @ Q[:-1, -1]
            step = f / df
            s = s - step
            if np.max(np.abs(step), initial=0.0) < 1e-15:
                break
        return s

    def _boundary(self, lift, n_bisect: int = 60):
        lo = np.zeros(len(self.dirs))
        hi = np.full(len(self.dirs), 2 * self.r2)
        for _ in range(n_bisect):
            mid = 0.5 * (lo + hi)
            up = self.center + mid[:, None] * self.dirs
            inside = self.hole.contains(np.column_stack([up, lift(up)]) @ self.Q.T)
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return 0.5 * (lo + hi)

    def _radial_ratio(self, v):
        if self.d == 2:
            return np.where(v[:, 0] >= 0, self.ratio[0], self.ratio[1])
        ang = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2 * np.pi)
        n = len(self.ratio)
        x = ang / (2 * np.pi) * n
        i0 = np.floor(x).astype(int) % n
        w = x - np.floor(x)
        return (1 - w) * self.ratio[i0] + w * self.ratio[(i0 + 1) % n]

    def in_plane(self, up) -> np.ndarray:
        v = up - self.center
        return self.center + v * self._radial_ratio(v)[:, None]

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        chi = _smoothstep_cutoff(np.linalg.norm(u, axis=1), self.r1, self.r2)
        act = chi > 0
        up = u[act, :-1]
        psi = self.in_plane(up)
        out[act, :-1] = chi[act, None] * (psi - up)
        out[act, -1] = chi[act] * (self.height(psi) - self.t)
        return out


def cell_capacity(surface: ConvexSurface, sieve: SieveConfig, k, *, h: float | None = None,
                  levels: int = 2, R: float | None = None, method: str = "newton",
                  hit=None) -> CapacityEstimate:
    """Capacity of the surface piece inside hole ``k``, relative to its cell ball.

    Solves the unit-scale problem for ``(Gamma - eps k)/a_eps ∩ T`` in
    ``B_R`` with ``R = eps / (2 a_eps)`` (the cell ball ``B_{eps/2}(eps k)``
    rescaled); ``scale = a_eps^(d-p)`` converts to physical units.  The
    default ``h`` is a quarter of the template circumradius.
    """
    hc = hit if hit is not None else _hit_cell(surface, sieve, k)
    S, _, _ = _graph_patch(surface, sieve, hc.k, hc.witness)
    rT = sieve.hole.circumradius
    R = sieve.eps / (2 * sieve.a_eps) if R is None else R
    h = rT / 4 if h is None else h
    prob = CapacityProblem(sieve.d, sieve.p, R, S, h, levels=levels, strict=False)
    est = solve_capacity(prob, method)
    return replace(est, scale=sieve.a_eps ** (sieve.d - sieve.p),
                   info={**est.info, "k": hc.k, "witness": np.asarray(hc.witness)})


def tangent_approx_gap(surface: ConvexSurface, sieve: SieveConfig, k, *, h: float | None = None,
                       levels: int = 3, method: str = "newton", hit=None,
                       return_estimates: bool = False):
    """``|cap(Gamma ∩ hole) - cap(P_x ∩ hole)| / a_eps^(d-p)`` at unit scale.

    ``P_x`` is the tangent plane at the surface point closest to the hole
    center (falling back to the enumeration witness when that point lies
    outside the hole).  Both capacities use the same grids and the same
    marked nodes (the tangent section); the curved piece is reached through
    :class:`TangentBending`, whose pull-back metric enters the energy.  The
    difference therefore varies smoothly with the curvature instead of
    jumping with node marking.  ``R = 4 r_T``.  The per-grid differences
    are Richardson-extrapolated as a sequence of their own, which is far
    more accurate than subtracting two separately extrapolated values.
    """
    hc = hit if hit is not None else _hit_cell(surface, sieve, k)
    c = sieve.hole_center(hc.k)
    x = _central_witness(surface, sieve, hc.k, hc.witness)
    G, gG, _ = _local_graph(surface, c, sieve.a_eps)
    zx = (x - c) / sieve.a_eps
    nu = np.append(-gG(zx[None, :-1])[0], 1.0)
    nu /= np.linalg.norm(nu)
    Q = aligned_frame(nu)
    t = float(nu @ zx)
    flat = RotatedSet(PlanarPatch(nu, t, sieve.hole), Q)
    bend = TangentBending(G, gG, Q, t, sieve.hole)
    rT = sieve.hole.circumradius
    h = rT / 8 if h is None else h
    R = 4 * rT * (1 + 1e-9)
    e_flat = solve_capacity(CapacityProblem(sieve.d, sieve.p, R, flat, h, levels=levels,
                                            strict=False), method)
    e_curved = solve_capacity(CapacityProblem(sieve.d, sieve.p, R, flat, h, levels=levels,
                                              strict=False, displacement=bend), method)
    diffs = [c["value"] - f["value"] for c, f in zip(e_curved.history, e_flat.history)]
    gap = abs(richardson(diffs)[0])
    log.debug("tangent gap at k=%s: %.6g vs %.6g", hc.k, e_curved.best, e_flat.best)
    if return_estimates:
        return gap, e_curved, e_flat
    return gap


def plane_tilt_gap(T: HoleShape, nu1, nu2, p: float, x, *, h: float | None = None,
                   levels: int = 2, method: str = "newton") -> float:
    """``|cap(P_1 ∩ T) - cap(P_2 ∩ T)|`` for planes through ``x`` with normals ``nu1, nu2``."""
    x = np.asarray(x, dtype=float)
    nu1, nu2 = np.asarray(nu1, float), np.asarray(nu2, float)
    if not (T.contains(x[None], tol=1e-12)[0]):
        raise ValueError("shared point must lie in T")
    rT = T.circumradius
    h = rT / 8 if h is None else h
    R = 4 * rT * (1 + 1e-9)
    vals = []
    for nu in (nu1, nu2):
        nu = nu / np.linalg.norm(nu)
        S = RotatedSet(PlanarPatch(nu, float(nu @ x), T), aligned_frame(nu))
        vals.append(solve_capacity(CapacityProblem(T.dim, p, R, S, h, levels=levels, strict=False),
                                   method).best)
    return abs(vals[0] - vals[1])


def farfield_tolerance(est: CapacityEstimate) -> float:
    """``2 h sup |grad W|`` over ``B_3 \\ B_2``, the allowed barrier violation."""
    gam = (est.p - est.d) / (est.p - 1)
    return 2 * est.h * abs(gam) / 2


def farfield_bound_check(est: CapacityEstimate) -> float:
    """Largest ``potential - W`` over nodes with ``|x| >= 2`` (unit-scale problems)."""
    X = est.node_coordinates().reshape(-1, est.d)
    r = np.linalg.norm(X, axis=1)
    sel = r >= 2
    if not np.any(sel):
        return -math.inf
    W = comparison_function(X[sel], est.d, est.p)
    return float(np.max(est.potential.reshape(-1)[sel] - W))

"""Discrete p-Dirichlet energies on uniform Cartesian grids and their minimisation.

The energy of a nodal field ``w`` is

    sum_cells ((|D w|^2 + mu^2)^(p/2) - mu^p) h^d  +  sum_nodes f w h^d
        + sum_facets c_f ((phi_f - (P w)_f)_+)^p

where ``D`` is the forward-difference gradient from the lower corner of each
cell.  Subtracting ``mu^p`` per cell leaves the minimiser unchanged and makes
the energy of a constant field exactly zero.  Nodes are split into fixed
(Dirichlet) nodes and free unknowns; box bounds may be put on the free ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

__all__ = [
    "Penalty",
    "GridEnergy",
    "OptimResult",
    "SolverError",
    "spd_solve",
    "minimize_box",
    "discrete_energy",
    "continuation_schedule",
]

DIRECT_SOLVE_MAX = 8_000


class SolverError(RuntimeError):
    """Raised when a minimisation fails to reach its tolerance."""

    def __init__(self, message, residual=np.nan, iterations=0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


def continuation_schedule(h: float) -> tuple[float, ...]:
    """Regularisation levels ``mu = c / h`` for ``c`` in 1e-2, 1e-4, 1e-6."""
    return tuple(c / h for c in (1e-2, 1e-4, 1e-6))


@dataclass(frozen=True, eq=False)
class Penalty:
    """``sum_f weight_f ((gap_f^2 + sigma^2)^(p/2) - sigma^p)`` with ``gap = (target - interp @ w)_+``.

    ``sigma = 0`` gives the plain p-power penalty; ``sigma > 0`` smooths its
    second derivative at contact, which matters for ``p < 2``.
    """

    interp: sp.csr_matrix
    weight: np.ndarray
    target: np.ndarray
    p: float
    sigma: float = 0.0

    def terms(self, gap):
        """Value, first and second derivative of the per-facet penalty in ``gap >= 0``."""
        p, sg2 = self.p, self.sigma ** 2
        s = gap * gap + sg2
        act = gap > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            val = s ** (p / 2) - self.sigma ** p
            d1 = np.where(act, p * gap * s ** (p / 2 - 1), 0.0)
            d2 = np.where(act, p * s ** (p / 2 - 2) * ((p - 1) * gap * gap + sg2), 0.0)
        return np.where(act, val, 0.0), d1, d2


def discrete_energy(w, h: float, p: float, mu: float = 0.0, metric=None) -> float:
    """Gradient part of the energy, re-evaluated directly from a nodal field.

    Kept independent of :class:`GridEnergy` (no sparse operators) so it can
    cross-check reported energies.  ``metric = (A, J)`` as in :class:`GridEnergy`.
    """
    w = np.asarray(w, dtype=float)
    d = w.ndim
    core = tuple(slice(0, n - 1) for n in w.shape)
    g = []
    for a in range(d):
        da = np.diff(w, axis=a) / h
        g.append(da[core[:a] + (slice(None),) + core[a + 1:]].reshape(-1))
    g = np.array(g)
    weight = np.ones(g.shape[1])
    if metric is not None:
        A, J = metric
        g = np.einsum("cia,ac->ic", A, g)
        weight = J
    s = mu * mu + np.sum(g * g, axis=0)
    return float(np.sum(weight * (s ** (p / 2) - mu ** p)) * h ** d)


class GridEnergy:
    """Energy over the free nodes of a grid with fixed Dirichlet data.

    Parameters
    ----------
    shape : tuple of int
        Number of nodes per axis.
    h : float
        Grid spacing.
    p : float
        Exponent of the gradient term.
    fixed : bool array of ``shape``
        Nodes whose values are prescribed.
    fixed_values : float array of ``shape``
        Values used on fixed nodes (ignored elsewhere).
    source : float array of ``shape``, optional
        Linear term ``f``; contributes ``sum f w h^d``.
    penalty : Penalty, optional
        Facet penalty acting on interpolated values.
    mu : float
        Regularisation of the gradient term.
    metric : (A, J), optional
        Per-cell pull-back of a smooth map ``Phi``: ``A`` has shape
        ``(n_cells, d, d)`` and holds ``DPhi^{-T}``, ``J`` holds
        ``|det DPhi|``; cells are the lower corners in C order.  The
        gradient term becomes ``sum J ((|A D w|^2 + mu^2)^(p/2) - mu^p) h^d``,
        the energy of ``w o Phi^{-1}`` on the mapped grid.
    """

    def __init__(self, shape, h, p, fixed, fixed_values, source=None, penalty=None, mu=0.0,
                 metric=None):
        self.shape = tuple(int(n) for n in shape)
        self.d = len(self.shape)
        self.h = float(h)
        self.p = float(p)
        self.mu = float(mu)
        fixed = np.asarray(fixed, dtype=bool).reshape(-1)
        self.fixed = fixed
        self.fixed_values = np.where(fixed, np.asarray(fixed_values, dtype=float).reshape(-1), 0.0)
        self.free_index = np.flatnonzero(~fixed)
        self.n_free = len(self.free_index)
        self.vol = self.h ** self.d
        self._build_differences(metric)
        self.source = None
        if source is not None:
            f = np.asarray(source, dtype=float).reshape(-1)
            self.source = f
            self._src_free = f[self.free_index] * self.vol
            self._src_const = float(np.dot(f[fixed], self.fixed_values[fixed]) * self.vol)
        self.penalty = penalty
        if penalty is not None:
            P = sp.csr_matrix(penalty.interp)
            self._pen_free = P[:, self.free_index].tocsr()
            self._pen_off = P @ self.fixed_values

    def _build_differences(self, metric):
        n_nodes = int(np.prod(self.shape))
        lower = np.indices(tuple(n - 1 for n in self.shape)).reshape(self.d, -1)
        corner = np.ravel_multi_index(lower, self.shape)
        strides = np.array([int(np.prod(self.shape[a + 1:])) for a in range(self.d)])
        free = ~self.fixed
        touched = free[corner].copy()
        for a in range(self.d):
            touched |= free[corner + strides[a]]
        inv_h = 1.0 / self.h
        # cells with only fixed corners contribute a constant
        dropped = corner[~touched]
        gf = np.array([(self.fixed_values[dropped + strides[a]] - self.fixed_values[dropped]) * inv_h
                       for a in range(self.d)]).reshape(self.d, -1)
        keep = np.any(gf != 0, axis=0)
        self._fixed_g = gf[:, keep]
        self.A = self.J = None
        self._fixed_A = self._fixed_J = None
        if metric is not None:
            A, J = metric
            A = np.asarray(A, dtype=float).reshape(-1, self.d, self.d)
            J = np.asarray(J, dtype=float).reshape(-1)
            if len(A) != len(corner) or len(J) != len(corner):
                raise ValueError("metric must give one entry per grid cell")
            self._fixed_A, self._fixed_J = A[~touched][keep], J[~touched][keep]
            self.A, self.J = A[touched], J[touched]
        corner = corner[touched]
        self.cells = corner
        m = len(corner)
        col_of = -np.ones(n_nodes, dtype=np.int64)
        col_of[self.free_index] = np.arange(self.n_free)
        self.D = []
        self.offset = []
        rows = np.arange(m)
        for a in range(self.d):
            lo, hi = corner, corner + strides[a]
            r_parts, c_parts, v_parts = [], [], []
            for nodes, sign in ((lo, -inv_h), (hi, inv_h)):
                cols = col_of[nodes]
                ok = cols >= 0
                r_parts.append(rows[ok])
                c_parts.append(cols[ok])
                v_parts.append(np.full(ok.sum(), sign))
            Da = sp.csr_matrix((np.concatenate(v_parts), (np.concatenate(r_parts), np.concatenate(c_parts))),
                               shape=(m, self.n_free))
            off = (self.fixed_values[hi] - self.fixed_values[lo]) * inv_h
            self.D.append(Da)
            self.offset.append(off)
        self._DT = [Da.T.tocsr() for Da in self.D]

    # -- field helpers -------------------------------------------------------

    def full(self, x) -> np.ndarray:
        """Nodal field (flat) from free values."""
        w = self.fixed_values.copy()
        w[self.free_index] = x
        return w

    def field(self, x) -> np.ndarray:
        return self.full(x).reshape(self.shape)

    def restrict(self, w) -> np.ndarray:
        return np.asarray(w, dtype=float).reshape(-1)[self.free_index]

    def _grads(self, x):
        return [Da @ x + off for Da, off in zip(self.D, self.offset)]

    def _density(self, x):
        """Grid gradient ``g``, mapped gradient ``q`` and ``s = |q|^2 + mu^2`` per cell."""
        g = np.array(self._grads(x)).reshape(self.d, -1)
        q = g if self.A is None else np.einsum("cia,ac->ic", self.A, g)
        return g, q, self.mu ** 2 + np.sum(q * q, axis=0)

    def _weight(self):
        return self.vol if self.J is None else self.J * self.vol

    # -- energy --------------------------------------------------------------

    def parts(self, x) -> dict:
        """Energy split into gradient, source and penalty terms."""
        _, _, s = self._density(x)
        mp = self.mu ** self.p
        grad_term = float(np.sum(self._weight() * (s ** (self.p / 2) - mp)))
        if self._fixed_g.shape[1]:
            gf = self._fixed_g
            if self._fixed_A is not None:
                gf = np.einsum("cia,ac->ic", self._fixed_A, gf)
            sf = self.mu ** 2 + np.sum(gf * gf, axis=0)
            wf = self.vol if self._fixed_J is None else self._fixed_J * self.vol
            grad_term += float(np.sum(wf * (sf ** (self.p / 2) - mp)))
        out = {"gradient": grad_term, "source": 0.0, "penalty": 0.0}
        if self.source is not None:
            out["source"] = float(np.dot(self._src_free, x) + self._src_const)
        if self.penalty is not None:
            gap = np.maximum(self.penalty.target - (self._pen_free @ x + self._pen_off), 0.0)
            out["penalty"] = float(np.dot(self.penalty.weight, self.penalty.terms(gap)[0]))
        return out

    def value(self, x) -> float:
        return sum(self.parts(x).values())

    def gradient(self, x) -> np.ndarray:
        _, q, s = self._density(x)
        c = self.p * s ** (self.p / 2 - 1) * self._weight()
        r = q if self.A is None else np.einsum("cia,ic->ac", self.A, q)
        out = np.zeros(self.n_free)
        for DaT, ra in zip(self._DT, r):
            out += DaT @ (c * ra)
        if self.source is not None:
            out += self._src_free
        if self.penalty is not None:
            pen = self.penalty
            gap = np.maximum(pen.target - (self._pen_free @ x + self._pen_off), 0.0)
            out -= self._pen_free.T @ (pen.weight * pen.terms(gap)[1])
        return out

    def hessian(self, x, penalty_reg: float = 1e-8) -> sp.csr_matrix:
        """Exact Hessian of the gradient term and of a smoothed penalty.

        An unsmoothed penalty (``sigma = 0``) with ``p < 2`` is only C^1 at
        contact; its second derivative is then replaced by
        ``p(p-1)(gap^2 + reg^2)^((p-2)/2)`` on the active facets.
        """
        _, q, s = self._density(x)
        w = self._weight()
        c1 = self.p * s ** (self.p / 2 - 1) * w
        c2 = self.p * (self.p - 2) * s ** (self.p / 2 - 2) * w if self.p != 2.0 else 0.0
        d = self.d
        if self.A is None:
            H = sum(DaT @ sp.diags(c1) @ Da for DaT, Da in zip(self._DT, self.D))
            if self.p != 2.0:
                for a in range(d):
                    for b in range(d):
                        H = H + self._DT[a] @ sp.diags(c2 * q[a] * q[b]) @ self.D[b]
        else:
            M = np.einsum("cia,cib->abc", self.A, self.A)
            r = np.einsum("cia,ic->ac", self.A, q)
            H = None
            for a in range(d):
                for b in range(d):
                    coef = c1 * M[a, b]
                    if self.p != 2.0:
                        coef = coef + c2 * r[a] * r[b]
                    term = self._DT[a] @ sp.diags(coef) @ self.D[b]
                    H = term if H is None else H + term
        if self.penalty is not None:
            pen = self.penalty
            gap = np.maximum(pen.target - (self._pen_free @ x + self._pen_off), 0.0)
            act = gap > 0
            if pen.sigma > 0:
                curv = pen.weight * pen.terms(gap)[2]
            else:
                curv = np.where(act, pen.p * (pen.p - 1) * pen.weight
                                * (gap * gap + penalty_reg ** 2) ** ((pen.p - 2) / 2), 0.0)
            H = H + self._pen_free.T @ sp.diags(curv) @ self._pen_free
        return sp.csr_matrix(H)


# ---------------------------------------------------------------------------
# linear algebra and optimisation


def spd_solve(A, b, rtol: float = 1e-10, x0=None) -> np.ndarray:
    """Solve an SPD sparse system: sparse LU when small, AMG-preconditioned CG otherwise."""
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    if n <= DIRECT_SOLVE_MAX:
        return spla.spsolve(sp.csc_matrix(A), b)
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(sp.csr_matrix(A), symmetry="symmetric")
    residuals = []
    x = ml.solve(b, x0=x0, tol=rtol, accel="cg", maxiter=500, residuals=residuals)
    bnorm = np.linalg.norm(b)
    if bnorm > 0 and np.linalg.norm(b - A @ x) > 100 * rtol * bnorm:
        log.warning("AMG-CG stopped at relative residual %.2e", np.linalg.norm(b - A @ x) / bnorm)
    return x


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    residual: float
    iterations: int
    converged: bool


def _scaled_residual(x, g, diag, lower, upper):
    # Jacobi-scaled projected gradient step, measured in units of the field
    return float(np.max(np.abs(x - np.clip(x - g / diag, lower, upper)), initial=0.0))


def minimize_box(energy: GridEnergy, x0, lower=-np.inf, upper=np.inf, tol=1e-6,
                 max_iter=200, method="newton", raise_on_fail=True) -> OptimResult:
    """Minimise ``energy`` subject to ``lower <= x <= upper``.

    ``method="newton"`` is a projected Newton method: variables sitting at a
    bound with the gradient pushing outward are frozen, the Newton system is
    solved on the rest, and an Armijo backtracking search runs along the
    projected arc.  ``method="bb"`` is a Jacobi-preconditioned projected
    gradient method with Barzilai-Borwein steps and the same Armijo search;
    it needs no linear solves but many more iterations.

    The stopping residual is the largest entry of
    ``x - P(x - g / diag(H))`` where ``P`` projects onto the bounds.
    """
    n = energy.n_free
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (n,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (n,))
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    if n == 0:
        return OptimResult(x, energy.value(x), 0.0, 0, True)
    if method == "newton":
        res = _projected_newton(energy, x, lower, upper, tol, max_iter)
    elif method == "bb":
        res = _projected_bb(energy, x, lower, upper, tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not res.converged and raise_on_fail:
        raise SolverError("minimisation did not converge", res.residual, res.iterations)
    return res


def _armijo(energy, x, f, g, direction, lower, upper, alpha=1.0, sigma=1e-4):
    slack = 1e-13 * max(abs(f), 1e-300)
    for _ in range(60):
        xn = np.clip(x + alpha * direction, lower, upper)
        dx = xn - x
        fn = energy.value(xn)
        if fn <= f + sigma * np.dot(g, dx) + slack:
            return xn, fn, alpha
        alpha *= 0.5
    return None, None, 0.0


def _projected_newton(energy, x, lower, upper, tol, max_iter):
    f = energy.value(x)
    g = energy.gradient(x)
    res = np.inf
    for it in range(max_iter + 1):
        H = energy.hessian(x)
        diag = H.diagonal()
        res = _scaled_residual(x, g, diag, lower, upper)
        if res < tol:
            return OptimResult(x, f, res, it, True)
        if it == max_iter:
            break
        eps_act = min(1e-3, res)
        act = ((x <= lower + eps_act) & (g > 0)) | ((x >= upper - eps_act) & (g < 0))
        direction = -g / diag
        free = np.flatnonzero(~act)
        if len(free):
            Hff = H[free][:, free]
            direction[free] = spd_solve(Hff, -g[free], rtol=min(1e-8, 1e-2 * res))
        xn, fn, alpha = _armijo(energy, x, f, g, direction, lower, upper)
        if xn is None:
            # Newton model useless here; fall back to a scaled gradient step
            xn, fn, alpha = _armijo(energy, x, f, g, -g / diag, lower, upper)
            if xn is None:
                break
        x, f = xn, fn
        g = energy.gradient(x)
    return OptimResult(x, f, res, it, False)


def _projected_bb(energy, x, lower, upper, tol, max_iter):
    diag = energy.hessian(x).diagonal()
    f = energy.value(x)
    g = energy.gradient(x)
    alpha = 1.0
    res = np.inf
    for it in range(max_iter + 1):
        res = _scaled_residual(x, g, diag, lower, upper)
        if res < tol:
            return OptimResult(x, f, res, it, True)
        if it == max_iter:
            break
        xn, fn, step = _armijo(energy, x, f, g, -g / diag, lower, upper, alpha=alpha)
        if xn is None:
            break
        gn = energy.gradient(xn)
        s, y = xn - x, gn - g
        sy = np.dot(s, y)
        alpha = float(np.clip(np.dot(s * diag, s) / sy, 1e-6, 1e6)) if sy > 0 else 1.0
        x, f, g = xn, fn, gn
        if it % 50 == 49:
            diag = energy.hessian(x).diagonal()
    return OptimResult(x, f, res, it, False)

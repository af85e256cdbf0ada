"""Mod-1 sequences generated by a convex graph and their discrepancy.

The sequence of interest is ``frac(g(eps*k') / eps)`` over the lattice
points ``eps*k'`` of a cube.  This module computes its extreme discrepancy
exactly, the Erdos-Turan and Erdos-Koksma upper bounds, the deviation
``|A/N - |I||`` for a fixed interval, and a power-law fit of its decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .surface import ConvexSurface, lattice_points

__all__ = [
    "ModOneSample",
    "DiscrepancyReport",
    "ExpSumBoundInput",
    "DeviationResult",
    "DecayFit",
    "frac",
    "surface_sequence",
    "discrepancy_exact",
    "discrepancy_brute_force",
    "star_discrepancy",
    "exponential_sum",
    "erdos_turan_bound",
    "erdos_koksma_sum_bound",
    "count_in_interval",
    "theorem1_deviation",
    "decay_fit",
    "fiber_decompose",
    "sweep_table",
]


def frac(x) -> np.ndarray:
    """Fractional part in ``[0, 1)`` (``np.mod`` can round up to 1.0)."""
    r = np.mod(np.asarray(x, dtype=float), 1.0)
    return np.where(r >= 1.0, 0.0, r)


@dataclass(frozen=True, eq=False)
class ModOneSample:
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if np.any((v < 0) | (v >= 1)) or not np.all(np.isfinite(v)):
            raise ValueError("mod-1 sample values must lie in [0, 1)")
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class DiscrepancyReport:
    """Extreme discrepancy with an interval attaining it.

    ``witness_kind`` is ``"closed"`` when the closed interval ``[a, b]``
    holds too many points and ``"open"`` when ``(a, b)`` holds too few.
    """

    D_N: float
    witness: tuple[float, float]
    witness_kind: str
    method: str


@dataclass(frozen=True)
class ExpSumBoundInput:
    k: int
    dF_a: float
    dF_b: float
    rho: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")


@dataclass(frozen=True)
class DeviationResult:
    deviation: float
    A: int
    N: int


@dataclass(frozen=True)
class DecayFit:
    exponent: float
    constant: float
    residual: float
    dropped: tuple = ()


def surface_sequence(surface: ConvexSurface, eps: float, q_low, q_high) -> ModOneSample:
    """``frac(g(eps*k') / eps)`` for ``eps*k'`` in ``[q_low, q_high)``, lexicographic in ``k'``."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    q_low = np.atleast_1d(np.asarray(q_low, dtype=float))
    q_high = np.atleast_1d(np.asarray(q_high, dtype=float))
    lo, hi = surface.domain_box
    if np.any(q_low < lo) or np.any(q_high > hi):
        raise ValueError("Q' must lie inside the surface domain box")
    kp = lattice_points(eps, q_low, q_high)
    values = frac(surface.g(eps * kp) / eps) if len(kp) else np.zeros(0)
    prov = {"eps": eps, "q_low": q_low.tolist(), "q_high": q_high.tolist(),
            "generator": f"surface:{surface.name}"}
    return ModOneSample(values, prov)


def discrepancy_exact(sample: ModOneSample) -> DiscrepancyReport:
    """Extreme discrepancy from the sorted sample.

    ``D_N = 1/N + max_j (j/N - x_(j)) - min_j (j/N - x_(j))``.  The supremum
    is the same for open, closed and half-open intervals.
    """
    x = np.sort(sample.values)
    n = len(x)
    if n == 0:
        raise ValueError("empty sample")
    t = np.arange(1, n + 1) / n - x
    i_max, i_min = int(np.argmax(t)), int(np.argmin(t))
    D = 1.0 / n + t[i_max] - t[i_min]
    if i_min <= i_max:
        witness, kind = (float(x[i_min]), float(x[i_max])), "closed"
    else:
        witness, kind = (float(x[i_max]), float(x[i_min])), "open"
    return DiscrepancyReport(float(D), witness, kind, "closed-form")


def discrepancy_brute_force(sample: ModOneSample) -> DiscrepancyReport:
    """O(N^2) scan over intervals with endpoints in ``{0, 1, x_i}``.

    Closed intervals are scanned for excess points and open ones for missing
    points; one-sided limits make every other interval type redundant.
    """
    xs = np.sort(sample.values)
    n = len(xs)
    if n == 0:
        raise ValueError("empty sample")
    ends = np.unique(np.concatenate([[0.0], xs, [1.0]]))
    left = np.searchsorted(xs, ends, "left")
    right = np.searchsorted(xs, ends, "right")
    length = ends[None, :] - ends[:, None]
    over = (right[None, :] - left[:, None]) / n - length
    under = length - (left[None, :] - right[:, None]) / n
    over[np.tril_indices(len(ends), -1)] = -np.inf
    under[np.tril_indices(len(ends), 0)] = -np.inf
    io, jo = np.unravel_index(np.argmax(over), over.shape)
    iu, ju = np.unravel_index(np.argmax(under), under.shape)
    if over[io, jo] >= under[iu, ju]:
        return DiscrepancyReport(float(over[io, jo]), (float(ends[io]), float(ends[jo])),
                                 "closed", "brute-force")
    return DiscrepancyReport(float(under[iu, ju]), (float(ends[iu]), float(ends[ju])),
                             "open", "brute-force")


def star_discrepancy(sample: ModOneSample) -> float:
    """Star discrepancy over anchored intervals ``[0, t)``; ``D* <= D <= 2 D*``."""
    x = np.sort(sample.values)
    n = len(x)
    if n == 0:
        raise ValueError("empty sample")
    return float(1.0 / (2 * n) + np.max(np.abs(x - (2 * np.arange(1, n + 1) - 1) / (2 * n))))


def exponential_sum(values, k: int) -> complex:
    """``sum_j exp(2 pi i k s_j)`` with exact phase reduction and ``math.fsum``."""
    theta = 2 * np.pi * frac(k * np.asarray(values, dtype=float))
    return complex(math.fsum(np.cos(theta)), math.fsum(np.sin(theta)))


def erdos_turan_bound(sample: ModOneSample, n: int | None = None) -> float:
    """Erdos-Turan upper bound on the discrepancy.

    ``1/n + (1/N) sum_{k<=n} |sum_j exp(2 pi i k s_j)| / k``; ``n`` defaults to
    ``ceil(N**(1/3))``, the choice that balances the two terms.
    """
    N = sample.N
    if N == 0:
        raise ValueError("empty sample")
    if n is None:
        n = max(1, math.ceil(N ** (1.0 / 3.0) - 1e-12))
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    terms = [abs(exponential_sum(sample.values, k)) / k for k in range(1, int(n) + 1)]
    return 1.0 / n + math.fsum(terms) / N


def erdos_koksma_sum_bound(inp: ExpSumBoundInput) -> float:
    """``(|F'(b) - F'(a)| + 2)(3 + 1/sqrt(rho))`` for ``F'' >= rho``."""
    return (abs(inp.dF_b - inp.dF_a) + 2.0) * (3.0 + 1.0 / math.sqrt(inp.rho))


def count_in_interval(values, lo: float, hi: float) -> int:
    """Number of values ``v`` with ``lo < v + m <= hi`` for some integer ``m``.

    Comparisons are exact (no tolerance).  ``0 <= lo <= hi <= 1``.
    """
    if not 0 <= lo <= hi <= 1:
        raise ValueError(f"need 0 <= lo <= hi <= 1, got ({lo}, {hi})")
    v = np.asarray(values, dtype=float)
    inside = (v > lo) & (v <= hi)
    wrapped = (v + 1.0 > lo) & (v + 1.0 <= hi)
    return int(np.count_nonzero(inside | wrapped))


def theorem1_deviation(surface: ConvexSurface, eps: float, q_low, q_high,
                       interval: tuple[float, float]) -> DeviationResult:
    """``|A/N - |I||`` where ``A`` counts sequence values in ``I`` (mod 1)."""
    sample = surface_sequence(surface, eps, q_low, q_high)
    if sample.N == 0:
        raise ValueError("empty sample: no lattice points in Q'")
    lo, hi = interval
    A = count_in_interval(sample.values, lo, hi)
    return DeviationResult(abs(A / sample.N - (hi - lo)), A, sample.N)


def decay_fit(pairs) -> DecayFit:
    """Least-squares fit ``log(dev) = alpha log(eps) + log(C)``.

    Pairs with zero deviation cannot enter the log fit; they are dropped and
    listed in ``dropped``.
    """
    pairs = [(float(e), float(v)) for e, v in pairs]
    used = [(e, v) for e, v in pairs if v > 0 and e > 0]
    dropped = tuple((e, v) for e, v in pairs if not (v > 0 and e > 0))
    if len(used) < 3:
        raise ValueError(f"need at least 3 positive deviations, got {len(used)}")
    le = np.log([e for e, _ in used])
    lv = np.log([v for _, v in used])
    alpha, logc = np.polyfit(le, lv, 1)
    resid = float(np.max(np.abs(lv - (alpha * le + logc))))
    return DecayFit(float(alpha), float(np.exp(logc)), resid, dropped)


def fiber_decompose(surface: ConvexSurface, eps: float, q_low, q_high) -> list[tuple[tuple, ModOneSample]]:
    """Split the sequence into 1-D fibres along the first lattice axis.

    Returns ``(k'', sample)`` pairs, one per transverse index ``k''``, each
    holding ``frac(g(eps*(k_1, k''))/eps)`` for increasing ``k_1``.  In
    ``d = 2`` there is a single fibre with ``k'' = ()``.
    """
    kp = lattice_points(eps, q_low, q_high)
    if surface.dim == 2 or len(kp) == 0:
        return [((), surface_sequence(surface, eps, q_low, q_high))]
    values = frac(surface.g(eps * kp) / eps)
    trans = kp[:, 1:]
    # primary key k'' (lexicographic), then k_1
    order = np.lexsort([kp[:, 0]] + [trans[:, i] for i in range(trans.shape[1] - 1, -1, -1)])
    fibres = {}
    for i in order:
        fibres.setdefault(tuple(int(v) for v in trans[i]), []).append(values[i])
    out = []
    for key in sorted(fibres):
        prov = {"eps": eps, "fiber": key, "generator": f"surface:{surface.name}"}
        out.append((key, ModOneSample(np.array(fibres[key]), prov)))
    return out


def sweep_table(surface: ConvexSurface, eps_list, q_low, q_high,
                interval: tuple[float, float], n: int | None = None) -> list[dict]:
    """One row per ``eps``: epsilon, N, A, deviation, bound_ET, D_exact."""
    rows = []
    for eps in eps_list:
        sample = surface_sequence(surface, eps, q_low, q_high)
        res = theorem1_deviation(surface, eps, q_low, q_high, interval)
        rows.append({
            "epsilon": float(eps),
            "N": res.N,
            "A": res.A,
            "deviation": res.deviation,
            "bound_ET": erdos_turan_bound(sample, n),
            "D_exact": discrepancy_exact(sample).D_N,
        })
    return rows

"""Experiment runners behind the command line.

Each runner takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentOutput`; nothing here touches the file system.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ExperimentConfig
from .equidistribution import decay_fit, sweep_table
from .homogenization import (ObstacleProblemSpec, build_limit_measure, convergence_experiment,
                             corrector_energy)
from .io import LineSeries
from .pcapacity import (CapacityProblem, SolidSet, mean_capacity, solve_capacity,
                        tangent_approx_gap)
from .surface import enumerate_hit_cells

log = logging.getLogger(__name__)

__all__ = ["Table", "Plot", "ExperimentOutput", "run_experiment"]


@dataclass
class Table:
    header: list
    rows: list
    meta: dict = field(default_factory=dict)


@dataclass
class Plot:
    series: list
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    logx: bool = False
    logy: bool = False


@dataclass
class ExperimentOutput:
    tables: dict = field(default_factory=dict)
    plots: dict = field(default_factory=dict)
    fields: dict = field(default_factory=dict)  # name -> (values, h, origin)


def _pmap(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def _discrepancy(cfg: ExperimentConfig, threads: int) -> ExperimentOutput:
    m = cfg.d - 1
    surf = cfg.surface()
    lo, hi = cfg.vector("region", "q_low", m), cfg.vector("region", "q_high", m)
    iv = tuple(cfg.floats("region", "interval"))
    rows = _pmap(lambda e: sweep_table(surf, [e], lo, hi, iv)[0], cfg.eps_list, threads)
    header = list(rows[0])
    fit = decay_fit((r["epsilon"], r["deviation"]) for r in rows)
    meta = {"fit_exponent": fit.exponent, "fit_constant": fit.constant,
            "fit_residual": fit.residual, "fit_dropped": len(fit.dropped)}
    eps = [r["epsilon"] for r in rows]
    plot = Plot([LineSeries(eps, [r["deviation"] for r in rows], "deviation"),
                 LineSeries(eps, [r["D_exact"] for r in rows], "D_N"),
                 LineSeries(eps, [fit.constant * e ** fit.exponent for e in eps],
                            f"fit eps^{fit.exponent:.3f}", marker=False)],
                "discrepancy decay", "eps", "value", logx=True, logy=True)
    return ExperimentOutput({"sequence": Table(header, rows, meta)}, {"decay": plot})


def _capacity(cfg: ExperimentConfig, threads: int) -> ExperimentOutput:
    S = SolidSet(cfg.hole())
    prob = CapacityProblem(cfg.d, cfg.p, cfg.number("grid", "R"), S, cfg.number("grid", "h"),
                           levels=cfg.integer("grid", "levels", 3), tol=cfg.number("tolerance", "tol"))
    est = solve_capacity(prob)
    header = ["h", "mu_reg", "value", "residual", "extrapolated"]
    meta = {"best": est.best, "global_value": est.global_value,
            "order": est.order if est.order is not None else "", "flags": ";".join(est.flags)}
    plot = Plot([LineSeries([r["h"] for r in est.history], [r["value"] for r in est.history], "value")],
                "capacity under refinement", "h", "value", logx=True)
    return ExperimentOutput({"capacity": Table(header, [[r[k] for k in header] for r in est.history], meta)},
                            {"refinement": plot}, {"potential": (est.potential, est.h, est.origin)})


def _mean_cap(cfg: ExperimentConfig, threads: int) -> ExperimentOutput:
    T = cfg.hole()
    tol = cfg.number("tolerance", "quad_tol", 0.02)
    cpr = cfg.integer("grid", "cells_per_radius", 4)
    levels = cfg.integer("grid", "levels", 2)
    nus = cfg.normals()
    res = _pmap(lambda nu: mean_capacity(T, nu, cfg.p, tol, cells_per_radius=cpr, levels=levels),
                nus, threads)
    header = [f"nu{i}" for i in range(cfg.d)] + ["value", "n_slices"]
    rows = [list(nu) + [r.value, len(r.table)] for nu, r in zip(nus, res)]
    vals = [r.value for r in res]
    meta = {"spread": (max(vals) - min(vals)) / max(abs(np.mean(vals)), 1e-300)}
    return ExperimentOutput({"mean_capacity": Table(header, rows, meta)})


def _corrector(cfg: ExperimentConfig, threads: int) -> ExperimentOutput:
    m = cfg.d - 1
    surf = cfg.surface()
    lo, hi = cfg.vector("region", "q_low", m), cfg.vector("region", "q_high", m)
    levels = cfg.integer("grid", "levels", 2)
    res = _pmap(lambda e: corrector_energy(surf, cfg.sieve(e), lo, hi, levels=levels),
                cfg.eps_list, threads)
    header = ["epsilon", "a_eps", "n_cells", "total", "density"]
    rows = [[e, cfg.a_eps(e), len(r.rows), r.total, r.density] for e, r in zip(cfg.eps_list, res)]
    eps = cfg.eps_list
    plot = Plot([LineSeries(eps, [r.total for r in res], "corrector total")],
                "corrector energy", "eps", "total", logx=True)
    return ExperimentOutput({"corrector": Table(header, rows)}, {"corrector": plot})


def _obstacle(cfg: ExperimentConfig):
    c = cfg.vector("obstacle", "center", cfg.d)
    r = cfg.number("obstacle", "radius")
    height = cfg.number("obstacle", "height", 1.0)
    src = cfg.number("obstacle", "source", 0.0)

    def phi(x):
        s = np.sum((np.asarray(x) - c) ** 2, axis=1) / r ** 2
        return height * np.maximum(1 - s, 0.0) ** 2

    def f(x):
        return np.full(len(x), src)

    return phi, f


def _homogenize(cfg: ExperimentConfig, threads: int) -> ExperimentOutput:
    phi, f = _obstacle(cfg)
    dom = (cfg.vector("domain", "low", cfg.d), cfg.vector("domain", "high", cfg.d))
    try:
        spec = ObstacleProblemSpec(dom, cfg.p, cfg.surface(), cfg.hole(), phi, source=f,
                                   grid_factor=cfg.number("grid", "grid_factor", 8.0),
                                   tol=cfg.number("tolerance", "tol", 1e-6))
    except ValueError as exc:
        raise ConfigError("homogenize", str(exc)) from None
    eps = sorted(cfg.eps_list, reverse=True)
    table = build_limit_measure(spec.surface, spec.hole, cfg.p, dom, mesh_size=spec.h_for(eps[-1]),
                                tol=cfg.number("tolerance", "quad_tol", 0.02))
    rows, sols = convergence_experiment(spec, eps, table, return_solutions=True)
    header = ["epsilon", "a_eps", "lp_distance", "energy_perforated", "energy_hom", "n_hit_cells"]
    plot = Plot([LineSeries(eps, [r.lp_distance for r in rows], "||u_eps - u||_p"),
                 LineSeries(eps, [abs(r.energy_perforated - r.energy_hom) for r in rows], "energy gap")],
                "homogenization", "eps", "", logx=True, logy=True)
    ue, uh = sols[-1]
    fields = {"u_eps": (ue.u, ue.h, ue.origin), "u_hom": (uh.u, uh.h, uh.origin)}
    meta = {"n_facets": len(table), "measure_mass": table.total_mass}
    return ExperimentOutput({"report": Table(header, [r.as_dict() for r in rows], meta)},
                            {"convergence": plot}, fields)


def _sweep(cfg: ExperimentConfig, threads: int) -> ExperimentOutput:
    """Tangent-plane approximation gap at the hit cell nearest ``region.center``."""
    surf = cfg.surface()
    x0 = cfg.vector("region", "center", cfg.d - 1)
    levels = cfg.integer("grid", "levels", 3)

    def one(e):
        sv = cfg.sieve(e)
        hits = enumerate_hit_cells(surf, sv, x0 - 2 * e, x0 + 2 * e)
        if not hits:
            raise ConfigError("region.center", f"no hit cell near the center at eps={e:g}")
        hc = min(hits, key=lambda h: float(np.linalg.norm(h.witness[:-1] - x0)))
        return hc.k, tangent_approx_gap(surf, sv, hc.k, hit=hc, levels=levels)

    eps = cfg.eps_list
    res = _pmap(one, eps, threads)
    header = ["epsilon", "a_eps", "cell", "gap"]
    rows = [[e, cfg.a_eps(e), " ".join(map(str, k)), g] for e, (k, g) in zip(eps, res)]
    plot = Plot([LineSeries(eps, [g for _, g in res], "tangent gap")],
                "tangent-plane approximation", "eps", "gap", logx=True, logy=True)
    return ExperimentOutput({"tangent_gap": Table(header, rows)}, {"tangent_gap": plot})


RUNNERS = {"discrepancy": _discrepancy, "capacity": _capacity, "mean-cap": _mean_cap,
           "corrector": _corrector, "homogenize": _homogenize, "sweep": _sweep}


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    # every runner is deterministic; the seed only fixes numpy's global state
    np.random.seed(cfg.seed % 2 ** 32)
    return RUNNERS[cfg.kind](cfg, max(int(threads), 1))

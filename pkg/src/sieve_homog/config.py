"""Experiment configuration files.

Grammar
-------
INI syntax as read by :mod:`configparser` (``key = value`` lines grouped in
``[section]`` blocks).  Whole-line comments start with ``;`` or ``#``;
trailing comments start with ``#``, since ``;`` inside a value separates
the vectors of a vector list.  Other lists are whitespace separated and
numbers may be written ``2^-5``.  Recognised sections and keys::

    [experiment]  kind (discrepancy | capacity | mean-cap | corrector | homogenize | sweep),
                  name, seed
    [model]       d, p                                   (required)
    [surface]     kind (quadratic | plane | cosh), hessian, linear, constant,
                  slope, half_width, domain_low, domain_high
    [hole]        kind (ball | cube | box), radius, side, half_widths
    [sieve]       eps (list), a_eps_ratio (optional: a_eps = ratio * eps)
    [region]      q_low, q_high, interval, center
    [grid]        R, h, levels, grid_factor, cells_per_radius
    [tolerance]   tol, quad_tol
    [capacity]    normals (vectors separated by ';')
    [domain]      low, high
    [obstacle]    center, radius, height, source

Unknown sections or keys are errors, so typos never pass silently.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .surface import (ConvexSurface, HoleShape, SieveConfig, cosh_surface, critical_hole_size,
                      plane_surface, quadratic_surface)

__all__ = ["ConfigError", "Diagnostic", "ExperimentConfig", "KINDS", "load_config", "parse_config",
           "validate_config"]

KINDS = ("discrepancy", "capacity", "mean-cap", "corrector", "homogenize", "sweep")

SCHEMA = {
    "experiment": {"kind", "name", "seed"},
    "model": {"d", "p"},
    "surface": {"kind", "hessian", "linear", "constant", "slope", "half_width", "domain_low",
                "domain_high"},
    "hole": {"kind", "radius", "side", "half_widths"},
    "sieve": {"eps", "a_eps_ratio"},
    "region": {"q_low", "q_high", "interval", "center"},
    "grid": {"R", "h", "levels", "grid_factor", "cells_per_radius"},
    "tolerance": {"tol", "quad_tol"},
    "capacity": {"normals"},
    "domain": {"low", "high"},
    "obstacle": {"center", "radius", "height", "source"},
}

# sections each kind cannot run without (beyond [experiment] and [model])
REQUIRED = {
    "discrepancy": {"surface": (), "sieve": ("eps",), "region": ("q_low", "q_high", "interval")},
    "capacity": {"hole": (), "grid": ("R", "h")},
    "mean-cap": {"hole": (), "capacity": ("normals",)},
    "corrector": {"surface": (), "hole": (), "sieve": ("eps",), "region": ("q_low", "q_high")},
    "homogenize": {"surface": (), "hole": (), "sieve": ("eps",), "domain": ("low", "high"),
                   "obstacle": ("center", "radius")},
    "sweep": {"surface": (), "hole": (), "sieve": ("eps",), "region": ("center",)},
}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending ``section.key``."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" | "warning"
    key: str
    message: str

    def __str__(self):
        return f"{self.level}: {self.key}: {self.message}"


_POW = re.compile(r"^([+-]?[\d.]+(?:e[+-]?\d+)?)\^([+-]?[\d.]+)$", re.I)


def _number(tok: str, key: str) -> float:
    m = _POW.match(tok)
    try:
        v = float(m.group(1)) ** float(m.group(2)) if m else float(tok)
    except (ValueError, OverflowError):
        raise ConfigError(key, f"not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise ConfigError(key, f"not finite: {tok!r}")
    return v


def _floats(text: str, key: str) -> np.ndarray:
    toks = text.replace(",", " ").split()
    if not toks:
        raise ConfigError(key, "empty value")
    return np.array([_number(t, key) for t in toks])


@dataclass
class ExperimentConfig:
    """Parsed, typed experiment description (see the module docstring for keys)."""

    kind: str
    name: str
    seed: int
    d: int
    p: float
    raw: dict
    source_text: str = ""
    diagnostics: list = field(default_factory=list)

    # -- typed getters -------------------------------------------------------

    def has(self, section, key) -> bool:
        return key in self.raw.get(section, {})

    def get(self, section, key, default=None) -> str | None:
        return self.raw.get(section, {}).get(key, default)

    def floats(self, section, key, default=None) -> np.ndarray | None:
        v = self.get(section, key)
        return default if v is None else _floats(v, f"{section}.{key}")

    def number(self, section, key, default=None) -> float | None:
        v = self.floats(section, key)
        if v is None:
            return default
        if len(v) != 1:
            raise ConfigError(f"{section}.{key}", "expected a single number")
        return float(v[0])

    def integer(self, section, key, default=None) -> int | None:
        v = self.number(section, key)
        if v is None:
            return default
        if v != int(v):
            raise ConfigError(f"{section}.{key}", "expected an integer")
        return int(v)

    def vector(self, section, key, n, default=None) -> np.ndarray | None:
        v = self.floats(section, key)
        if v is None:
            return default
        if len(v) == 1 and n > 1:
            v = np.full(n, v[0])
        if len(v) != n:
            raise ConfigError(f"{section}.{key}", f"expected {n} numbers, got {len(v)}")
        return v

    # -- model objects -------------------------------------------------------

    @property
    def eps_list(self) -> list[float]:
        return [float(e) for e in self.floats("sieve", "eps")]

    @property
    def tol(self) -> float:
        return self.number("tolerance", "tol", 1e-8 if self.p == 2 else 1e-6)

    def surface(self) -> ConvexSurface:
        m = self.d - 1
        kind = self.get("surface", "kind", "quadratic")
        lo = self.vector("surface", "domain_low", m)
        hi = self.vector("surface", "domain_high", m)
        box = None if lo is None and hi is None else (
            lo if lo is not None else np.full(m, -10.0), hi if hi is not None else np.full(m, 10.0))
        try:
            if kind == "quadratic":
                H = self.floats("surface", "hessian")
                if H is None:
                    raise ConfigError("surface.hessian", "required for a quadratic surface")
                if len(H) == m:
                    H = np.diag(H)
                elif len(H) == m * m:
                    H = H.reshape(m, m)
                else:
                    raise ConfigError("surface.hessian", f"expected {m} or {m * m} numbers")
                return quadratic_surface(H, self.vector("surface", "linear", m),
                                         self.number("surface", "constant", 0.0), box)
            if kind == "plane":
                return plane_surface(self.vector("surface", "slope", m, np.zeros(m)),
                                     self.number("surface", "constant", 0.0), box)
            if kind == "cosh":
                if m != 1:
                    raise ConfigError("surface.kind", "the cosh surface needs d = 2")
                return cosh_surface(self.number("surface", "half_width", 2.0))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError("surface", str(exc)) from None
        raise ConfigError("surface.kind", f"unknown surface kind {kind!r}")

    def hole(self) -> HoleShape:
        kind = self.get("hole", "kind", "ball")
        try:
            if kind == "ball":
                return HoleShape.ball(self.d, self.number("hole", "radius", 1.0))
            if kind == "cube":
                return HoleShape.cube(self.d, self.number("hole", "side", 1.0))
            if kind == "box":
                w = self.vector("hole", "half_widths", self.d)
                if w is None:
                    raise ConfigError("hole.half_widths", "required for a box")
                return HoleShape.box(w)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError("hole", str(exc)) from None
        raise ConfigError("hole.kind", f"unknown hole kind {kind!r}")

    def a_eps(self, eps) -> float:
        r = self.number("sieve", "a_eps_ratio")
        return critical_hole_size(eps, self.d, self.p) if r is None else r * eps

    def sieve(self, eps) -> SieveConfig:
        try:
            return SieveConfig(eps, self.a_eps(eps), self.d, self.p, self.hole())
        except ValueError as exc:
            raise ConfigError("sieve.a_eps_ratio" if self.has("sieve", "a_eps_ratio") else "sieve.eps",
                              str(exc)) from None

    def normals(self) -> list[np.ndarray]:
        text = self.get("capacity", "normals")
        out = []
        for part in text.split(";"):
            if part.strip():
                v = _floats(part, "capacity.normals")
                if len(v) != self.d or not np.linalg.norm(v) > 0:
                    raise ConfigError("capacity.normals", f"each normal needs {self.d} numbers, not all zero")
                out.append(v / np.linalg.norm(v))
        if not out:
            raise ConfigError("capacity.normals", "no normals given")
        return out


def parse_config(text: str, origin: str = "<string>") -> ExperimentConfig:
    """Parse configuration text; raises :class:`ConfigError` on schema violations."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                   comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError("file", f"cannot parse {origin}: {exc}") from None
    raw = {s: dict(cp[s]) for s in cp.sections()}
    for s, keys in raw.items():
        if s not in SCHEMA:
            raise ConfigError(s, "unknown section")
        for k in keys:
            if k not in SCHEMA[s]:
                raise ConfigError(f"{s}.{k}", "unknown key")
    kind = raw.get("experiment", {}).get("kind")
    if kind is None:
        raise ConfigError("experiment.kind", "missing required key")
    if kind not in KINDS:
        raise ConfigError("experiment.kind", f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    model = raw.get("model", {})
    for k in ("d", "p"):
        if k not in model:
            raise ConfigError(f"model.{k}", f"missing required key {k!r}")
    cfg = ExperimentConfig(kind, raw["experiment"].get("name", kind), 0, 0, 0.0, raw, text)
    cfg.d = cfg.integer("model", "d")
    cfg.p = cfg.number("model", "p")
    cfg.seed = cfg.integer("experiment", "seed", 0)
    for section, keys in REQUIRED[kind].items():
        if section not in raw:
            raise ConfigError(section, f"missing required section for kind {kind!r}")
        for k in keys:
            if k not in raw[section]:
                raise ConfigError(f"{section}.{k}", f"missing required key {k!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("file", f"cannot read {path}: {exc}") from None
    return parse_config(text, str(path))


def validate_config(cfg: ExperimentConfig) -> list[Diagnostic]:
    """Cross-field checks; nothing is solved.  Returns errors and warnings."""
    out = []

    def err(key, msg):
        out.append(Diagnostic("error", key, msg))

    def warn(key, msg):
        out.append(Diagnostic("warning", key, msg))

    d, p = cfg.d, cfg.p
    if d < 2:
        err("model.d", "dimension must be at least 2")
    if not p > 1:
        err("model.p", "p must exceed 1")
    elif not p < d:
        err("model.p", "p must be smaller than d (points have positive capacity otherwise)")
    if out:
        return out
    if not p < (d + 4) / 4:
        warn("model.p", f"1 < p < (d+4)/4 = {(d + 4) / 4:g} fails; the homogenized limit is not "
                        "covered (capacity-only experiments are fine)")
    try:
        surface = cfg.surface() if "surface" in cfg.raw else None
        hole = cfg.hole() if "hole" in cfg.raw else None
        if surface is not None and surface.dim != d:
            err("surface", f"surface lives in R^{surface.dim}, model.d = {d}")
        if cfg.has("sieve", "eps"):
            eps = cfg.eps_list
            if any(e <= 0 or e >= 1 for e in eps):
                err("sieve.eps", "every eps must lie in (0, 1)")
            elif hole is not None:
                for e in eps:
                    cfg.sieve(e)
            if cfg.kind in ("discrepancy", "homogenize") and len(eps) < 3:
                err("sieve.eps", "at least three values are needed")
        if cfg.has("region", "q_low") or cfg.has("region", "q_high"):
            lo = cfg.vector("region", "q_low", d - 1)
            hi = cfg.vector("region", "q_high", d - 1)
            if lo is None or hi is None or np.any(hi <= lo):
                err("region", "q_low < q_high required componentwise")
            elif surface is not None and (np.any(lo < surface.domain_box[0]) or
                                          np.any(hi > surface.domain_box[1])):
                err("region", "box leaves the surface domain")
        if cfg.has("region", "interval"):
            iv = cfg.floats("region", "interval")
            if len(iv) != 2 or not 0 <= iv[0] < iv[1] <= 1:
                err("region.interval", "need 0 <= lo < hi <= 1")
        if cfg.kind == "capacity":
            R, h = cfg.number("grid", "R"), cfg.number("grid", "h")
            r = hole.circumradius
            if not R >= 4 * r:
                err("grid.R", f"condenser radius must be at least 4 x set radius = {4 * r:g}")
            feat = 2 * (hole.radius if hole.kind == "ball" else float(np.min(hole.half_widths))
                        if hole.kind == "box" else r)
            if not 0 < h <= feat / 4:
                err("grid.h", f"h must lie in (0, feature/4 = {feat / 4:g}]")
            if cfg.integer("grid", "levels", 3) < 1:
                err("grid.levels", "need at least one level")
        if cfg.has("grid", "grid_factor") and cfg.number("grid", "grid_factor") < 4:
            err("grid.grid_factor", "grid spacing must satisfy h <= a_eps/4 (grid_factor >= 4)")
        if cfg.kind == "mean-cap":
            cfg.normals()
        if cfg.kind == "homogenize":
            lo = cfg.vector("domain", "low", d)
            hi = cfg.vector("domain", "high", d)
            if np.any(hi <= lo):
                err("domain", "low < high required componentwise")
            c = cfg.vector("obstacle", "center", d)
            rad = cfg.number("obstacle", "radius")
            if not rad > 0:
                err("obstacle.radius", "must be positive")
            elif np.any(c - rad <= lo) or np.any(c + rad >= hi):
                err("obstacle", "the obstacle support must stay away from the domain boundary")
    except ConfigError as exc:
        err(exc.key, str(exc).split(": ", 1)[-1])
    return out

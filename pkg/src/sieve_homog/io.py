"""CSV tables, flat binary fields and a small SVG line-plot emitter.

CSV files are UTF-8 with a header row and ``.`` decimals.  Floats are
written with ``repr`` so :func:`read_csv` restores them bit for bit.
Footer metadata goes on trailing ``# key=value`` lines.

Binary fields are little-endian: the magic ``b"SHF1"``, ``uint32 d``,
``d`` x ``uint64`` dims, ``float64 h``, ``d`` x ``float64`` origin, then the
row-major ``float64`` values.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["CsvTable", "write_csv", "read_csv", "write_field", "read_field",
           "LineSeries", "svg_line_plot", "sha256_file"]

MAGIC = b"SHF1"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, (tuple, list, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def _parse(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


@dataclass
class CsvTable:
    header: list
    rows: list
    meta: dict = field(default_factory=dict)

    def column(self, name):
        i = self.header.index(name)
        return [r[i] for r in self.rows]


def write_csv(path, header, rows, meta: dict | None = None) -> Path:
    """Write rows (sequences or dicts keyed by ``header``) and optional footer metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(header)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            if isinstance(r, dict):
                r = [r[k] for k in header]
            if len(r) != len(header):
                raise ValueError(f"row has {len(r)} fields, header has {len(header)}")
            w.writerow([_fmt(v) for v in r])
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={_fmt(v)}\n")
    return path


def read_csv(path) -> CsvTable:
    header, rows, meta = None, [], {}
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.startswith("# "):
                k, _, v = line[2:].rstrip("\n").partition("=")
                meta[k] = _parse(v)
                continue
            rec = next(csv.reader([line]))
            if header is None:
                header = rec
            else:
                rows.append([_parse(s) for s in rec])
    if header is None:
        raise ValueError(f"{path}: empty CSV")
    return CsvTable(header, rows, meta)


def write_field(path, values, h: float, origin) -> Path:
    """Dump a nodal field in the flat binary format."""
    values = np.ascontiguousarray(values, dtype="<f8")
    d = values.ndim
    origin = np.asarray(origin, dtype="<f8").reshape(d)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", d))
        fh.write(struct.pack(f"<{d}Q", *values.shape))
        fh.write(struct.pack("<d", float(h)))
        fh.write(origin.tobytes())
        fh.write(values.tobytes(order="C"))
    return path


def read_field(path):
    """Inverse of :func:`write_field`; returns ``(values, h, origin)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a field file")
    (d,) = struct.unpack_from("<I", data, 4)
    off = 8
    dims = struct.unpack_from(f"<{d}Q", data, off)
    off += 8 * d
    (h,) = struct.unpack_from("<d", data, off)
    off += 8
    origin = np.frombuffer(data, "<f8", d, off)
    off += 8 * d
    n = int(np.prod(dims))
    if len(data) != off + 8 * n:
        raise ValueError(f"{path}: truncated field file")
    values = np.frombuffer(data, "<f8", n, off).reshape(dims)
    return values.astype(float), h, origin.astype(float)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# SVG


@dataclass
class LineSeries:
    x: list
    y: list
    label: str
    marker: bool = True


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo, hi, log):
    if log:
        return [10.0 ** k for k in range(math.floor(lo), math.ceil(hi) + 1)]
    step = 10 ** math.floor(math.log10(max(hi - lo, 1e-300)))
    if (hi - lo) / step < 4:
        step /= 2
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def svg_line_plot(path, series, *, title="", xlabel="", ylabel="", logx=False, logy=False,
                  width=480, height=360) -> Path:
    """Static line plot; log axes drop nonpositive points."""
    ml, mr, mt, mb = 70, 20, 30, 50
    tx = math.log10 if logx else float
    ty = math.log10 if logy else float
    pts = []
    for s in series:
        keep = [(tx(a), ty(b)) for a, b in zip(s.x, s.y)
                if (a > 0 or not logx) and (b > 0 or not logy) and np.isfinite(a) and np.isfinite(b)]
        pts.append(keep)
    flat = [q for p in pts for q in p] or [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(q[0] for q in flat), max(q[0] for q in flat)
    y0, y1 = min(q[1] for q in flat), max(q[1] for q in flat)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    W, H = width - ml - mr, height - mt - mb

    def X(v):
        return ml + (v - x0) / (x1 - x0) * W

    def Y(v):
        return mt + (y1 - v) / (y1 - y0) * H

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{ml}" y="{mt}" width="{W}" height="{H}" fill="none" stroke="black"/>']
    for v in _ticks(x0, x1, logx):
        tv = math.log10(v) if logx else v
        if x0 <= tv <= x1:
            out.append(f'<line x1="{X(tv):.2f}" y1="{mt + H}" x2="{X(tv):.2f}" y2="{mt + H + 4}" stroke="black"/>')
            out.append(f'<text x="{X(tv):.2f}" y="{mt + H + 16}" text-anchor="middle">{v:.3g}</text>')
    for v in _ticks(y0, y1, logy):
        tv = math.log10(v) if logy else v
        if y0 <= tv <= y1:
            out.append(f'<line x1="{ml - 4}" y1="{Y(tv):.2f}" x2="{ml}" y2="{Y(tv):.2f}" stroke="black"/>')
            out.append(f'<text x="{ml - 6}" y="{Y(tv) + 4:.2f}" text-anchor="end">{v:.3g}</text>')
    for i, (s, p) in enumerate(zip(series, pts)):
        c = _COLORS[i % len(_COLORS)]
        if len(p) > 1:
            d = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in p)
            out.append(f'<polyline points="{d}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        if s.marker:
            out += [f'<circle cx="{X(a):.2f}" cy="{Y(b):.2f}" r="3" fill="{c}"/>' for a, b in p]
        ly = mt + 14 + 14 * i
        out.append(f'<line x1="{ml + 8}" y1="{ly - 4}" x2="{ml + 24}" y2="{ly - 4}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{ml + 28}" y="{ly}">{escape(s.label)}</text>')
    out.append(f'<text x="{width / 2}" y="{mt - 10}" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append(f'<text x="{ml + W / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + H / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + H / 2})">{escape(ylabel)}</text>')
    out.append("</svg>\n")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out), encoding="utf-8")
    return path

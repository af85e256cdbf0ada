"""Command line front end: ``sieve-homog {run,validate,list-fixtures}``.

Exit codes: 0 success, 2 invalid configuration, 3 solver failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config, parse_config, validate_config
from .discrete import SolverError
from .experiments import run_experiment
from .fixtures import FIXTURES
from .io import sha256_file, svg_line_plot, write_csv, write_field
from .pcapacity import QuadratureError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

log = logging.getLogger("sieve_homog")


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("SIEVE_HOMOG_THREADS")
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            raise ConfigError("SIEVE_HOMOG_THREADS", f"not an integer: {env!r}") from None
    return 1


def _load(args):
    if args.fixture:
        if args.fixture not in FIXTURES:
            raise ConfigError("fixture", f"unknown fixture {args.fixture!r}")
        return parse_config(FIXTURES[args.fixture][1], f"fixture:{args.fixture}")
    if not args.config:
        raise ConfigError("config", "give --config PATH or --fixture NAME")
    return load_config(args.config)


def write_outputs(out, run_dir: Path) -> list[Path]:
    """Write tables, plots and fields in a fixed order, then the manifest."""
    paths = []
    for name in sorted(out.tables):
        t = out.tables[name]
        paths.append(write_csv(run_dir / f"{name}.csv", t.header, t.rows, t.meta))
    for name in sorted(out.plots):
        p = out.plots[name]
        paths.append(svg_line_plot(run_dir / f"{name}.svg", p.series, title=p.title, xlabel=p.xlabel,
                                   ylabel=p.ylabel, logx=p.logx, logy=p.logy))
    for name in sorted(out.fields):
        v, h, origin = out.fields[name]
        paths.append(write_field(run_dir / f"{name}.bin", v, h, origin))
    lines = [f"{sha256_file(p)}  {p.name}" for p in paths]
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths


def cmd_run(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg.seed = args.seed
    diags = validate_config(cfg)
    for d in diags:
        print(d, file=sys.stderr)
    if any(d.level == "error" for d in diags):
        return EXIT_CONFIG
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    run_dir = Path(args.out) / f"{cfg.name}-{stamp}"
    n = 1
    while run_dir.exists():
        run_dir = Path(args.out) / f"{cfg.name}-{stamp}-{n}"
        n += 1
    out = run_experiment(cfg, _threads(args.threads))
    run_dir.mkdir(parents=True)
    (run_dir / "config.ini").write_text(cfg.source_text, encoding="utf-8")
    paths = write_outputs(out, run_dir)
    if not args.quiet:
        print(run_dir)
        for p in paths:
            print(f"  {p.name}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args)
    diags = validate_config(cfg)
    for d in diags:
        print(d)
    if not diags and not args.quiet:
        print("ok")
    return EXIT_CONFIG if any(d.level == "error" for d in diags) else EXIT_OK


def cmd_list(args) -> int:
    for name, (desc, _) in FIXTURES.items():
        print(f"{name:24s} {desc}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI experiment configuration")
    common.add_argument("--fixture", metavar="NAME", help="use a built-in configuration")
    common.add_argument("--out", metavar="DIR", default="results",
                        help="parent directory for run folders (default: results)")
    common.add_argument("--threads", metavar="N", type=int, default=None,
                        help="worker threads (default: $SIEVE_HOMOG_THREADS or 1)")
    common.add_argument("--seed", metavar="N", type=int, default=None,
                        help="override experiment.seed")
    common.add_argument("--quiet", action="store_true", help="only report errors")
    ap = argparse.ArgumentParser(prog="sieve-homog", description="Sieve homogenization experiments.",
                                 epilog="exit codes: 0 success, 2 invalid configuration, 3 solver failure")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run an experiment").set_defaults(fn=cmd_run)
    sub.add_parser("validate", parents=[common], help="check a configuration").set_defaults(fn=cmd_validate)
    sub.add_parser("list-fixtures", parents=[common], help="list built-in configurations").set_defaults(fn=cmd_list)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, QuadratureError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end.

Exit codes: 0 success, 1 verification/validation failed, 2 configuration or
input error, 3 transport or protocol error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .bench import bench, format_table
from .config import RunConfig
from .errors import ConfigError, ShapeError, TransportError
from .runtime import run, tcp_worker_main
from .tensor import load_tensor, max_abs_diff, save_tensor
from .transport.schedule import literal_programs, validate_schedule

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_TRANSPORT = 0, 1, 2, 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--workers", type=int)
    p.add_argument("--transport", choices=("inproc", "tcp"))
    p.add_argument("--listen", help="TCP coordinator address host:port (env VINF_LISTEN)")
    p.add_argument("--out")
    p.add_argument("--metrics", help="append line-delimited JSON metrics here")
    p.add_argument("--validating", action="store_true", default=None)


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(args.set)
    for key in ("workers", "transport", "listen", "out", "metrics", "validating"):
        value = getattr(args, key, None)
        if value is not None:
            cfg = cfg.replace(**{key: value})
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args).validate()
    x0, report = run(cfg)
    save_tensor(cfg.out, x0)
    if cfg.metrics:
        report.append_jsonl(cfg.metrics, digest=f"{cfg.digest():016x}")
    print(f"wrote {cfg.out} {x0.shape} workers={cfg.workers} transport={cfg.transport} "
          f"wall={report.wall_seconds:.3f}s bytes={report.bytes_by_kind()}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        a, b = load_tensor(args.a), load_tensor(args.b)
    except OSError as exc:
        raise ShapeError(f"cannot read dump: {exc}") from exc
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = max_abs_diff(a, b)
    mismatches = int(np.count_nonzero(np.abs(a.astype(np.float64) - b) > args.tolerance))
    ok = diff <= args.tolerance
    print(f"max_abs_diff={diff:.6e} mismatches={mismatches} tolerance={args.tolerance:g} "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    sweep = [int(s) for s in args.sweep.split(",")]
    rows = bench(cfg, sweep, ablations=not args.no_ablation)
    print(format_table(rows))
    if cfg.metrics:
        with open(cfg.metrics, "a", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return EXIT_OK


def cmd_validate_schedule(args: argparse.Namespace) -> int:
    ns = [args.workers] if args.exact else range(1, args.workers + 1)
    ok = True
    for n in ns:
        verdict = validate_schedule(n, literal_programs(n) if args.literal else None)
        ok &= verdict.ok
        print(f"N={n:>3} {verdict}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_worker(args: argparse.Namespace) -> int:
    return tcp_worker_main(args.config, args.connect)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vinf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="denoise one latent and write the x_0 dump")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="compare two tensor dumps")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="sweep worker counts, report sync overhead")
    _add_config_flags(p)
    p.add_argument("--sweep", default="1,2,4")
    p.add_argument("--no-ablation", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate-schedule", help="simulate the per-layer schedule")
    p.add_argument("--workers", type=int, default=16)
    p.add_argument("--exact", action="store_true", help="only N=--workers, not 1..N")
    p.add_argument("--literal", action="store_true",
                   help="validate the naive recv-first pair order instead")
    p.set_defaults(func=cmd_validate_schedule)

    p = sub.add_parser("worker", help="(internal) TCP worker process")
    p.add_argument("--config", required=True)
    p.add_argument("--connect", required=True)
    p.set_defaults(func=cmd_worker)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())

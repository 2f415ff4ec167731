"""Command-line benchmark harness.

Subcommands: ``benchmark`` (one configured solve), ``convergence`` (error
sweep for the analytic case), and ``metrics`` (partition-metric sweeps).
Results go to stdout or ``--out`` as CSV or JSON; ``--figures DIR``
additionally renders matplotlib figures next to the tables.

Exit codes: 0 on success, 1 on configuration errors, 2 on solver divergence.
"""

from __future__ import annotations

import argparse
import sys

from .benchmarks import (
    CONVERGENCE_COLUMNS,
    CSV_COLUMNS,
    METRICS_COLUMNS,
    PROFILE_COLUMNS,
    BenchmarkConfig,
    ConfigError,
    PRESETS,
    rows_to_csv,
    rows_to_json,
    run_benchmark,
    run_convergence_study,
    run_metrics_sweep,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_CONFIG)


def _int_list(text: str):
    return [int(t) for t in text.split(",") if t]


def _str_list(text: str):
    return [t for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="treemg", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("benchmark", help="run one benchmark configuration")
    b.add_argument("--preset", choices=sorted(PRESETS), help="named configuration")
    b.add_argument("--case", choices=["octant", "shell", "cube", "gaussian"])
    b.add_argument("--refinements", "-L", type=int)
    b.add_argument("--degree", "-p", type=int)
    b.add_argument("--variant", choices=["ls", "gc", "pc"])
    b.add_argument("--pc-coarse", choices=["ls", "gc"])
    b.add_argument("--ranks", "-P", type=int)
    b.add_argument("--policy", choices=["auto", "first_child", "sfc_per_level"])
    b.add_argument("--smoother-degree", "-k", type=int)
    b.add_argument("--rtol", type=float)
    b.add_argument("--precision", choices=["double", "single"])
    b.add_argument("--hn-weight", type=float)
    b.add_argument("--max-iterations", type=int)

    c = sub.add_parser("convergence", help="error sweep for the analytic case")
    c.add_argument("--degree", "-p", type=int, required=True)
    c.add_argument("--l-min", type=int, default=3)
    c.add_argument("--l-max", type=int, default=6)
    c.add_argument("--case", default="gaussian", choices=["gaussian"])
    c.add_argument("--variant", default="gc", choices=["ls", "gc", "pc"])
    c.add_argument("--rtol", type=float, default=1e-10)
    c.add_argument("--precision", default="double", choices=["double", "single"])

    m = sub.add_parser("metrics", help="partition metric sweep")
    m.add_argument("--case", required=True, choices=["octant", "shell", "cube"])
    m.add_argument("--refinements", "-L", type=int, required=True)
    m.add_argument("--ranks", type=_int_list, default=[1, 8, 16, 32],
                   help="comma-separated rank counts")
    m.add_argument("--policies", type=_str_list,
                   default=["first_child", "sfc_per_level"])
    m.add_argument("--variants", type=_str_list, default=["ls", "gc"])
    m.add_argument("--hn-weight", type=float, default=2.0)

    for p in (b, c, m):
        p.add_argument("--output", choices=["csv", "json"], default="csv")
        p.add_argument("--out", help="write the table here instead of stdout")
        p.add_argument("--figures", help="directory for rendered figures")
    return ap


def _emit(records, columns, args, extra_tables=()):
    if args.output == "json":
        text = rows_to_json(records)
    else:
        text = rows_to_csv(records, columns)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        for suffix, recs, cols in extra_tables:
            path = args.out + suffix
            with open(path, "w") as fh:
                if args.output == "json":
                    fh.write(rows_to_json(recs))
                else:
                    fh.write(rows_to_csv(recs, cols))
    else:
        sys.stdout.write(text)


def _config_from_args(args) -> BenchmarkConfig:
    if args.preset:
        cfg = PRESETS[args.preset]
        overrides = {}
    else:
        cfg = None
        overrides = {}
    fields = {
        "case": args.case,
        "refinements": args.refinements,
        "degree": args.degree,
        "variant": args.variant,
        "pc_coarse": args.pc_coarse,
        "ranks": args.ranks,
        "policy": args.policy,
        "smoother_degree": args.smoother_degree,
        "rtol": args.rtol,
        "precision": args.precision,
        "hn_weight": args.hn_weight,
        "max_iterations": args.max_iterations,
    }
    overrides = {k: v for k, v in fields.items() if v is not None}
    if cfg is None:
        for required in ("case", "refinements", "degree"):
            if required not in overrides:
                raise ConfigError(f"--{required.replace('_', '-')} is required "
                                  "unless --preset is given")
        cfg = BenchmarkConfig(
            overrides.pop("case"), overrides.pop("refinements"),
            overrides.pop("degree"),
        )
    from dataclasses import replace

    return replace(cfg, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "benchmark":
            cfg = _config_from_args(args)
            row = run_benchmark(cfg)
            _emit([row.to_json_record() if args.output == "json"
                   else row.to_record()], CSV_COLUMNS, args)
            if args.figures:
                from .plots import render_benchmark_row

                render_benchmark_row(row, args.figures)
            return EXIT_DIVERGED if row.status == "diverged" else EXIT_OK
        if args.command == "convergence":
            recs = run_convergence_study(
                args.degree, range(args.l_min, args.l_max + 1), case=args.case,
                variant=args.variant, rtol=args.rtol, precision=args.precision,
            )
            _emit(recs, CONVERGENCE_COLUMNS, args)
            if args.figures:
                from .plots import render_convergence

                render_convergence(recs, args.figures)
            return EXIT_OK
        if args.command == "metrics":
            summary, profile = run_metrics_sweep(
                args.case, args.refinements, args.ranks,
                policies=args.policies, variants=args.variants,
                hn_weight=args.hn_weight,
            )
            _emit(summary, METRICS_COLUMNS, args,
                  extra_tables=[(".profile", profile, PROFILE_COLUMNS)])
            if args.figures:
                from .plots import render_level_profile

                render_level_profile(profile, args.figures)
            return EXIT_OK
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

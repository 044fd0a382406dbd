"""Command-line entry point: ``mast run|sweep|robustness|verify``.

Exit codes: 0 success, 1 a verification check failed, 2 invalid configuration,
3 input/output error. Outputs go under ``$MAST_OUTPUT_ROOT`` (default ``runs``).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .data import LibsvmError
from .sketch import SupportTooLarge
from .solvers import ConfigError, MissingConstant

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mast", description="Sketched-model training experiments and checks.")
    ap.add_argument("--version", action="version", version=f"mast {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train on every configured seed and write runs.csv and summary.csv")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (default: $MAST_OUTPUT_ROOT/<config name>)")
    run.add_argument("--jobs", type=int, default=1, help="worker processes for seeds")

    sweep = sub.add_parser("sweep", help="repeat a run over values of one parameter")
    sweep.add_argument("config")
    sweep.add_argument("--axis", required=True, help="gamma_multiplier, q, kappa, p or b")
    sweep.add_argument("--values", nargs="*", default=[], help="space or comma separated values")
    sweep.add_argument("--out")
    sweep.add_argument("--jobs", type=int, default=1)

    rob = sub.add_parser("robustness", help="test accuracy of randomly sparsified models")
    rob.add_argument("config")
    rob.add_argument("--n", type=int, default=None, help="number of sampled sketches")
    rob.add_argument("--out")

    for cmd in (run, sweep, rob):
        cmd.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                         help="override one config field, e.g. sketch.q=0.7 (repeatable)")

    ver = sub.add_parser("verify", help="run the built-in inequality and convergence checks")
    ver.add_argument("--filter", default=None, help="only checks whose id starts with this prefix")
    ver.add_argument("--inject-fault", action="store_true", help="corrupt the smoothness constant (negative control)")
    ver.add_argument("--out", help="directory for report.csv (default: $MAST_OUTPUT_ROOT/verify)")
    return ap


def _split_values(values) -> list[str]:
    return [v for item in values for v in item.split(",") if v.strip()]


def _apply_overrides(cfg, pairs):
    import yaml

    for pair in pairs:
        path, sep, raw = pair.partition("=")
        if not sep or not path:
            raise ConfigError(f"--set {pair!r}: expected PATH=VALUE")
        cfg = cfg.with_value(path.strip(), yaml.safe_load(raw))
    return cfg


def _verify(args) -> int:
    from . import checks
    from .experiment import csv_text, output_root, write_text

    try:
        rows = checks.run_checks(args.filter, inject_fault=args.inject_fault)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.check_id} value={r.value:.6g} limit={r.limit:.6g} {r.detail}".rstrip())
    out = Path(args.out) if args.out else output_root() / "verify"
    header = {"version": __version__, "filter": args.filter or "", "inject_fault": args.inject_fault}
    write_text(out / "report.csv", csv_text(header, ("check", "value", "limit", "passed", "detail"),
                                            [r.as_row() for r in rows]))
    failed = [r.check_id for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_CHECK if failed else EXIT_OK


def _dispatch(args) -> int:
    if args.command == "verify":
        return _verify(args)
    from . import experiment
    from .config import load_config

    cfg = _apply_overrides(load_config(args.config), args.set)
    out = Path(args.out) if args.out else None
    if args.command == "run":
        res = experiment.cmd_run(cfg, out, args.jobs)
    elif args.command == "sweep":
        res = experiment.cmd_sweep(cfg, args.axis, _split_values(args.values), out, args.jobs)
    else:
        res = experiment.cmd_robustness(cfg, args.n, out)
        for row in res["summary"]:
            print(f"{row['model']}: median sparsified test accuracy {row['median']:.4f} "
                  f"(unsketched {row['unsketched']:.4f})")
    print(f"wrote {res['dir']}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, MissingConstant, SupportTooLarge) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, LibsvmError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

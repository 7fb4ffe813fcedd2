"""Command line: validate a scenario, run it into a bundle, report on a bundle.

Exit codes: 0 success, 1 scenario validation failure, 2 I/O error,
3 runtime abort (the bundle is left marked PARTIAL).
"""
from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .report import build_report
from .scenario import PROFILES, ScenarioError, load, parse_duration, resolve

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 so that 2 stays reserved for I/O failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="simpleics", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a scenario document")
    v.add_argument("scenario", nargs="?", help="scenario JSON (bundled default if omitted)")

    r = sub.add_parser("run", help="simulate a scenario and export a bundle")
    r.add_argument("--scenario", help="scenario JSON (bundled default if omitted)")
    r.add_argument("--seed", type=int, help="master seed (beats the document and SIMPLEICS_SEED)")
    r.add_argument("--duration", help="virtual duration, e.g. 90s, 15m, 1h, 5d")
    r.add_argument("--profile", choices=PROFILES, default="default")
    r.add_argument("--no-campaign", action="store_true", help="benign run")
    r.add_argument("--out", required=True, help="bundle directory")

    p = sub.add_parser("report", help="summarise a bundle")
    p.add_argument("bundle")
    p.add_argument("--out", help="write tables and figures here")
    p.add_argument("--window", default="1h", help="protocol count window (default 1h)")
    p.add_argument("--delimiter", choices=("csv", "tsv"), default="csv")
    return ap


def _load(path):
    try:
        return load(path)
    except ScenarioError as exc:
        for where, msg in exc.errors:
            print(f"{where}: {msg}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_IO)


def cmd_validate(args) -> int:
    doc = _load(args.scenario)
    print(f"{doc.get('name', args.scenario or 'default')}: ok")
    return EXIT_OK


def cmd_run(args) -> int:
    from .world import run_to_bundle
    doc = _load(args.scenario)
    try:
        settings = resolve(doc, seed=args.seed, duration=args.duration, profile=args.profile,
                           campaign=False if args.no_campaign else None)
    except (ScenarioError, ValueError) as exc:
        print(f"invalid settings: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        manifest = run_to_bundle(doc, settings, args.out)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - any fault aborts the run
        print(f"run aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    counts = manifest["record_counts"]
    print(f"bundle {args.out}: seed {settings.seed}, campaign {manifest['campaign_status']}, "
          + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_report(args) -> int:
    delim = "\t" if args.delimiter == "tsv" else ","
    try:
        window = parse_duration(args.window)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    try:
        res = build_report(args.bundle, args.out, window, delim)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"cannot read bundle: {exc}", file=sys.stderr)
        return EXIT_IO
    from .report import to_delimited
    for name in ("latency", "protocols", "coverage"):
        print(f"# {name}")
        print(to_delimited(res[name], delim), end="")
    s = res["protocol_summary"]
    print(f"# modbus/mqtt ratio {s['ratio']:.3f} (predicted {s['predicted_ratio']:.3f}, "
          f"target {s['target_ratio']})")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = {"validate": cmd_validate, "run": cmd_run, "report": cmd_report}[args.command]
    try:
        return handler(args)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())

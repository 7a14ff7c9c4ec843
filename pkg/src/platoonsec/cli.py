"""``platoonsec`` command line: validate, run and report.

Exit codes: 0 success, 1 configuration or input error, 2 numeric divergence
(the partial log is still written).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from platoonsec.config import ScenarioError, bundled_scenarios, dump_snapshot, load_config, validate_file
from platoonsec.engine import run_scenario, summarize
from platoonsec.logio import LogFormatError, mark_aborted, read_log, summary_json, write_log, write_plotdata, write_summary

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2
SNAPSHOT_NAME = "config.yaml"


def _overrides(args) -> dict:
    return {"seed": args.seed, "duration": args.duration, "noise_sigma": args.noise_sigma}


def cmd_validate(args) -> int:
    issues = validate_file(args.config)
    if args.format == "json":
        print(json.dumps({"config": str(args.config), "valid": not issues, "issues": issues}, indent=2))
    elif issues:
        for issue in issues:
            print(f"error: {issue}", file=sys.stderr)
    else:
        print(f"{args.config}: ok")
    return EXIT_CONFIG if issues else EXIT_OK


def cmd_run(args) -> int:
    try:
        config = load_config(args.config, _overrides(args))
    except ScenarioError as exc:
        for issue in exc.issues:
            print(f"error: {exc.source + ': ' if exc.source else ''}{issue}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or Path("runs") / config.name)
    out.mkdir(parents=True, exist_ok=True)
    log, report = run_scenario(config)
    write_log(log, out / "log.csv")
    write_summary(report, out / "summary.json")
    write_plotdata(log, out / "plotdata")
    dump_snapshot(config, out / SNAPSHOT_NAME)
    if args.format == "json":
        print(summary_json(report), end="")
    else:
        print(f"{config.name}: {report.verdict()}")
        print(f"wrote {out}")
    if report.aborted:
        print(f"error: state diverged at t = {log.t[-1]:g} s; partial log kept", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_report(args) -> int:
    log_path = Path(args.log)
    config_path = Path(args.config) if args.config else log_path.parent / SNAPSHOT_NAME
    try:
        config = load_config(config_path)
        log = mark_aborted(read_log(log_path), config)
    except ScenarioError as exc:
        for issue in exc.issues:
            print(f"error: {exc.source + ': ' if exc.source else ''}{issue}", file=sys.stderr)
        return EXIT_CONFIG
    except (LogFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = summarize(log, config)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_summary(report, out / "summary.json")
    if args.format == "json":
        print(summary_json(report), end="")
    else:
        print(report.verdict())
    return EXIT_OK


def cmd_list(args) -> int:
    for name, path in bundled_scenarios().items():
        print(f"{name}\t{path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platoonsec", description="CACC platoon attack detection simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def fmt(p):
        p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("--config", required=True, help="scenario file or bundled scenario name")
    fmt(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="simulate a scenario and write its artifacts")
    p.add_argument("--config", required=True, help="scenario file or bundled scenario name")
    p.add_argument("--out", help="output directory (default runs/<name>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--noise-sigma", type=float)
    fmt(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="recompute the summary from a log")
    p.add_argument("--log", required=True, help="log.csv written by run")
    p.add_argument("--config", help=f"scenario file (default: {SNAPSHOT_NAME} next to the log)")
    p.add_argument("--out", help="directory to write summary.json into")
    fmt(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("list", help="list bundled scenarios")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

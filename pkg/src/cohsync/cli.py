"""Command line: ``cohsync run|sweep|compare``.

Exit codes: 0 success, 1 configuration error, 2 runtime or watchdog error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiment import (ExperimentConfig, compare_profiles, csv_text, emit_cdf, run_experiment,
                         write_json)
from .sim import ConfigError, SimError

log = logging.getLogger("cohsync")


def _parse_axis(text: str) -> tuple[str, list]:
    name, eq, values = text.partition("=")
    if not eq or not name or not values:
        raise ConfigError(f"--axis expects name=v1,v2,...; got {text!r}")
    out = []
    for v in values.split(","):
        try:
            out.append(json.loads(v))
        except json.JSONDecodeError:
            out.append(v)
    return name.strip(), out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cohsync", description="Coherence and lock simulation experiments.")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="CSV output path (default: stdout)")
        sp.add_argument("--json", dest="json_out", help="also write rows and latency CDFs as JSON")
        sp.add_argument("--cdf", help="write the first run's latency CDF table here")
        sp.add_argument("--trace", help="JSONL event trace (one file per sweep point)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="run one config (its sweep axes included)"))
    sp = sub.add_parser("sweep", help="run a config with sweep axes overridden")
    common(sp)
    sp.add_argument("--axis", action="append", default=[], help="name=v1,v2,... (repeatable)")
    sp = sub.add_parser("compare", help="run one config under several network profiles")
    common(sp)
    sp.add_argument("--profiles", required=True, help="comma-separated profile names")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        keep_cdf = bool(args.json_out or args.cdf)
        if args.cmd == "sweep":
            for a in args.axis:
                name, values = _parse_axis(a)
                cfg.sweep[name] = values
            cfg.validate()
        if args.cmd == "compare":
            names = [s.strip() for s in args.profiles.split(",") if s.strip()]
            records = compare_profiles(cfg, names, jobs=args.jobs, trace_path=args.trace, keep_cdf=keep_cdf)
        else:
            records = run_experiment(cfg, jobs=args.jobs, trace_path=args.trace, keep_cdf=keep_cdf)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SimError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    text = csv_text(records)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.json_out:
        write_json(records, args.json_out)
    if args.cdf and records:
        emit_cdf(records[0], args.cdf)
    log.info("%d row(s) written", len(records))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``simulate``, ``calibrate`` and ``report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigInvalid, load_scenario
from .harness import IoError, NoConvergence, calibrate_capacity, report, run_scenario


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="overload-sim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario sweep and write CSVs and plots")
    sim.add_argument("scenario")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seeds", type=_ints)
    sim.add_argument("--rho", type=_floats)
    sim.add_argument("--scheme", action="append", help="restrict to a scheme; repeatable")
    sim.add_argument("--jobs", type=int, default=1, help="worker processes")
    sim.add_argument("--no-plots", action="store_true")

    cal = sub.add_parser("calibrate", help="print the calibrated capacity of a scenario")
    cal.add_argument("scenario")

    rep = sub.add_parser("report", help="rebuild aggregate CSVs and plots from a run directory")
    rep.add_argument("dir")
    rep.add_argument("--no-plots", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "simulate":
            out = run_scenario(
                args.scenario,
                args.out,
                rhos=args.rho,
                seeds=args.seeds,
                schemes=args.scheme,
                jobs=args.jobs,
                plots=not args.no_plots,
            )
            print(f"wrote {out}")
        elif args.command == "calibrate":
            scen = load_scenario(args.scenario)
            cap = calibrate_capacity(scen)
            print(json.dumps({"scenario": scen.name, "capacity_rps": cap}, indent=2))
        else:
            for path in report(args.dir, plots=not args.no_plots):
                print(path)
    except (ConfigInvalid, IoError, NoConvergence, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

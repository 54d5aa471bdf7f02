"""``calo-opt`` command line: run studies, validate numerics, re-render reports."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PROFILES, STUDIES, ConfigError, parse_bool, parse_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3
EXIT_VALIDATION = 4


def _on_off(text: str) -> bool:
    try:
        return parse_bool(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI in GeV, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calo-opt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a study and write its report")
    run.add_argument("--study", choices=STUDIES)
    run.add_argument("--variant", choices=("mi", "reco"))
    run.add_argument("--layers", type=int, choices=(1, 2, 3))
    run.add_argument("--events", type=int)
    run.add_argument("--tl", type=_on_off, dest="transfer", metavar="{on,off}")
    run.add_argument("--runs", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--iterations", type=int)
    run.add_argument("--candidates", type=int)
    run.add_argument("--energy-range", type=_range, metavar="LO,HI")
    run.add_argument("--profile", choices=PROFILES)
    run.add_argument("--out", dest="out_dir")
    run.add_argument("--config", type=Path, help="INI file; flags override its values")

    sub.add_parser("validate", help="run the numerical oracle suite")

    report = sub.add_parser("report", help="re-emit the SVG of a finished study")
    report.add_argument("directory", type=Path)
    return parser


def _run(args) -> int:
    from .report import emit_report
    from .runner import StudyFailure, run_replicas

    flags = {k: getattr(args, k) for k in ("study", "variant", "layers", "events", "transfer", "runs",
                                           "seed", "iterations", "candidates", "energy_range",
                                           "profile", "out_dir")}
    try:
        config = parse_config(args.config, **flags)
        config.loop_config(0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(config.out_dir)
    try:
        result = run_replicas(config, out)
        paths = emit_report(result, out)
    except StudyFailure as exc:
        print(f"study failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except OSError as exc:
        print(f"cannot write report: {exc}", file=sys.stderr)
        return EXIT_RUN
    agg = result.aggregate
    print(f"final mean scintillator {agg.final('scint_sum'):.3f} cm, absorber {agg.final('abs_sum'):.3f} cm "
          f"over {agg.runs} run(s)")
    for path in paths.values():
        print(path)
    return EXIT_OK


def _validate() -> int:
    from .validate import run_suite
    results = run_suite()
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VALIDATION if failed else EXIT_OK


def _report(args) -> int:
    from .report import rerender
    try:
        print(rerender(args.directory))
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot render report: {exc}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return _run(args)
    if args.command == "validate":
        return _validate()
    return _report(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 when every requested diagnostic passes, 1 on a validation or
usage error, 2 when a diagnostic fails.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .runner import RunManifest, diagnose, doubleslit_scenario, run
from .scenario import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_DIAGNOSTIC = 2


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _counts(text: str) -> list[int]:
    try:
        values = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N[,N...], got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("dot counts must be positive integers")
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pilotwave", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="evolve a scenario and write its outputs")
    p.add_argument("--config", required=True, help="scenario INI file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=_u64, help="override the trajectory seed")

    p = sub.add_parser("diagnose", help="evolve a scenario and write every diagnostic")
    p.add_argument("--config", required=True, help="scenario INI file")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("doubleslit", help="shipped double-slit dot accumulation")
    p.add_argument("--dots", type=_counts, default=None,
                   help="staged dot counts N[,N...] (default: the shipped stages)")
    p.add_argument("--seed", type=_u64, help="trajectory seed")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _print_table(manifest: RunManifest) -> None:
    if not manifest.diagnostics:
        return
    width = max(len(n) for n in manifest.diagnostics)
    for name, ok in manifest.diagnostics.items():
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "doubleslit":
            scenario = doubleslit_scenario(args.dots, args.seed)
            manifest = run(scenario, args.out)
        else:
            scenario = load_scenario(args.config)
            if args.command == "run":
                manifest = run(scenario, args.out, seed=args.seed)
            else:
                manifest = diagnose(scenario, args.out)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    _print_table(manifest)
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK if manifest.diagnostics_passed else EXIT_DIAGNOSTIC


if __name__ == "__main__":
    sys.exit(main())

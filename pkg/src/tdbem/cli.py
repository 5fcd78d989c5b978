"""Command line front end: `tdbem <command> <config.json>`.

Exit codes: 0 on success, 2 for configuration problems (bad JSON,
unknown keys, inconsistent scheme), 3 for numerical failures during a
run.  Set TDBEM_NUM_THREADS to cap the BLAS/FFT thread pools; it must
be set before the first import of the package.
"""

from __future__ import annotations

import argparse
import sys

from .runner import ConfigError, load_config, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tdbem",
        description="time-domain boundary element scenarios from JSON "
                    "configs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in (
            ("solve", "march one formulation and write its densities"),
            ("error-study", "refinement ladder against a point source"),
            ("check-hypotheses", "verify the evolution hypotheses and "
                                 "bound margins"),
            ("probe-bounds", "operator norm growth along a frequency "
                             "ladder")):
        cmd = sub.add_parser(name, help=blurb)
        cmd.add_argument("config", help="path to a flat JSON config")
        cmd.add_argument("--out", default=None,
                         help="output directory (overrides the config)")
        cmd.add_argument("--quiet", action="store_true",
                         help="suppress the artifact listing")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        data = load_config(args.config)
        report, artifacts = run_scenario(args.command, data, args.config,
                                         args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - anything past config checks
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if not args.quiet:
        for path in artifacts:
            print(path)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

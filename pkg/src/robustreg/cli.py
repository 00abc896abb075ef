"""Command-line entry point: ``robustreg --config FILE --out DIR``.

Exit status is 0 when every declared check passes, 1 when a check fails and
2 when the scenario cannot be parsed or names an unknown model.
"""

import argparse
import json
import logging
import sys

from .model import ConfigurationError
from .scenario import SHIPPED, load_config, run_scenario

log = logging.getLogger("robustreg")


def build_parser():
    p = argparse.ArgumentParser(prog="robustreg", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True,
                   help=f"scenario TOML file or shipped name ({', '.join(SHIPPED)})")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--check-only", action="store_true",
                   help="verify the design and chart without simulating")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        ok, results = run_scenario(cfg, args.out, args.seed, args.check_only)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, passed in results.items():
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    log.info("results: %s", json.dumps(results))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

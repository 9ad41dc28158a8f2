#!/usr/bin/env python3
"""Grid sweep of the social/context fusion weights on a synthetic dataset.

Example:
    python scripts/run_weight_sweep.py --output-dir runs/sweep --seed 1 \
        --set "w_social_grid=[0.0,0.1,0.3]" --set "w_context_grid=[0.0,0.3,0.5]"
"""

import argparse
import sys

from gamerec.cli import main as cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output-dir", default="runs/sweep")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()

    out = args.output_dir
    common = [
        "--output-dir", out,
        "--seed", str(args.seed),
        "--threads", str(args.threads),
        "--set", f"engagements_path={out}/engagements.tsv",
        "--set", f"social_path={out}/social.tsv",
        "--set", f"catalog_path={out}/catalog.tsv",
    ]
    for override in args.set:
        common += ["--set", override]
    for command in ("gen-synthetic", "sweep"):
        rc = cli([command, *common])
        if rc != 0:
            return rc
    print(f"sweep complete; see {out}/sweep.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())

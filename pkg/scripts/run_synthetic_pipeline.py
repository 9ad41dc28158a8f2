#!/usr/bin/env python3
"""Generate a synthetic dataset, build the graph, train and evaluate.

Example:
    python scripts/run_synthetic_pipeline.py --output-dir runs/demo --seed 1
"""

import argparse
import sys

from gamerec.cli import main as cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output-dir", default="runs/synthetic")
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
    for command in ("gen-synthetic", "build-graph", "train", "evaluate"):
        rc = cli([command, *common])
        if rc != 0:
            return rc
    print(f"pipeline complete; see {out}/metrics.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())

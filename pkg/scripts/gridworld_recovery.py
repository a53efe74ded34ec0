#!/usr/bin/env python3
"""Train the quasimetric critic on an 8x8 gridworld dynamics table and
report how closely the learned distances recover the exact shortest-path
matrix (mean relative error, Spearman, constraint satisfaction)."""

import argparse
import json

from qrl import acceptance


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=acceptance.GRID_STEPS)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional JSON report path")
    args = ap.parse_args()

    metrics, _critic = acceptance.run_gridworld_recovery(args.steps, seed=args.seed)
    print(json.dumps(metrics, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(metrics, f, indent=2)


if __name__ == "__main__":
    main()

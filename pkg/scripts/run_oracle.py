"""Sampler checks against closed-form posteriors; exit status 2 on failure.

    python3 scripts/run_oracle.py --out runs/oracle [--lr-multiplier 10]
"""

import argparse
import json
import sys

from uqshift import pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/oracle")
    ap.add_argument("--lr-multiplier", type=float, default=1.0)
    ap.add_argument("--runs", type=int, default=10)
    args = ap.parse_args()
    report, ok = pipeline.cmd_oracle(None, args.out, args.lr_multiplier, args.runs)
    print(json.dumps(report, indent=2))
    sys.exit(0 if ok else 2)


if __name__ == "__main__":
    main()

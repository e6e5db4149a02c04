"""Train and evaluate all four methods on the desk-scale blur sweep, then summarise the trends.

    python3 scripts/run_benchmark.py --out runs/bench [--config configs/benchmark.cfg]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from uqshift import config, pipeline
from uqshift.analysis import spearman

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=ROOT / "configs" / "benchmark.cfg")
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--methods", default="MAP,MCD,DE,cSGHMC")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = config.load(args.config, seed=args.seed)
    t0 = time.time()
    reports = pipeline.run_benchmark(cfg, args.out, args.methods.split(","))
    summary = {}
    for name, rep in reports.items():
        rows = rep.rows
        blur = [r for r in rep.results if r.spec.kind == "blur"]
        summary[name] = {
            "dice_clean": rows[0].dice_mean, "dice_max_blur": blur[-1].row.dice_mean,
            "ece_clean": rows[0].ece, "ece_max_blur": blur[-1].row.ece,
            "entropy_by_blur": [r.mean_entropy for r in blur],
            "entropy_spearman": spearman([r.spec.level for r in blur], [r.mean_entropy for r in blur]),
        }
    summary["seconds"] = round(time.time() - t0, 1)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()

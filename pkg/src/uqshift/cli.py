"""``uqshift`` command line: generate-data, train, evaluate, diversity, oracle."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import pipeline
from .errors import UQError
from .metrics import MetricRow


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uqshift", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(name, help_text, config_required=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=config_required, help="flat section.key = value file")
        sp.add_argument("--out", required=True, help="output directory owned by this run")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. method.name=DE")
        return sp

    common("generate-data", "write the synthetic dataset and split manifests")
    common("train", "train the configured method and save its ensemble")
    for name, text in (("evaluate", "run the shift sweep and write reports"),
                       ("diversity", "pairwise correlation of ensemble members")):
        sp = common(name, text)
        sp.add_argument("--ensemble", help="ensemble manifest (default <out>/models/<method>/ensemble.json)")
    sp = common("oracle", "sampler checks against analytic posteriors", config_required=False)
    sp.add_argument("--lr-multiplier", type=float, default=1.0,
                    help="scale every sampler step size (large values should fail)")
    sp.add_argument("--runs", type=int, default=10)
    return p


def _config(args):
    if args.config is None:
        return config_mod.loads("", args.set) if args.seed is None else \
            config_mod.loads("", [*args.set, f"run.seed={args.seed}"])
    return config_mod.load(args.config, args.set, seed=args.seed)


def _dispatch(args, out: Path) -> int:
    cfg = _config(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "generate-data":
        print(pipeline.cmd_generate(cfg, out))
    elif args.command == "train":
        print(pipeline.cmd_train(cfg, out))
    elif args.command == "evaluate":
        report = pipeline.cmd_evaluate(cfg, out, args.ensemble)
        print(MetricRow.CSV_HEADER)
        for row in report.rows:
            print(row.csv_line())
    elif args.command == "diversity":
        summary = pipeline.cmd_diversity(cfg, out, args.ensemble)
        print(f"{summary['method']}: mean off-diagonal correlation {summary['mean_offdiag']:.4f}")
    elif args.command == "oracle":
        report, ok = pipeline.cmd_oracle(cfg, out, args.lr_multiplier, args.runs)
        print(json.dumps({"passed": ok, "moments_passed": report["moments"]["passed"],
                          "csghmc_runs_with_both_modes": report["two_mode"]["csghmc_runs_with_both_modes"],
                          "sgd_runs_with_one_mode": report["two_mode"]["sgd_runs_with_one_mode"]}))
        return 0 if ok else 2
    return 0


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        with np.errstate(over="ignore", invalid="ignore"):  # divergence surfaces as NumericalError
            return _dispatch(args, out)
    except UQError as exc:
        print(f"uqshift {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"uqshift {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"uqshift {args.command}: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

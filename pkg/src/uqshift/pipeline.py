"""Benchmark commands: data generation, training, shift-sweep evaluation, diversity, oracles.

Everything under ``<out>/reports/`` is a deterministic function of the config
and seed; wall-clock timings go to ``<out>/logs/`` instead so that report
bytes are reproducible.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import UncMap, aggregate_uncertainty, diversity_matrix, entropy_histogram
from .config import RunConfig
from .data import SegData, dataset_exists, generate, load_split, save_tensor, write_dataset
from .errors import ConfigError, EmptyResultError, PathError
from .metrics import MetricRow, ReliabilityBins, brier, dice, ece, nll
from .oracle import (ConjugateLinReg, OracleSamplerConfig, TwoModeConfig, TwoModeModel,
                     mode_visit_count, sghmc_vs_analytic, two_mode_csghmc, two_mode_sgd)
from .samplers import CyclicalSchedule, TrainConfig, steps_per_epoch
from .shifts import ShiftSpec, apply_shift, kde, shift_labels
from .uq_methods import (PosteriorEnsemble, SegProblem, load_ensemble, member_probs,
                         predictive_entropy, sample_mcd, save_ensemble, train_csghmc,
                         train_deep_ensemble, train_map)

log = logging.getLogger(__name__)

KDE_RANGE = (-0.25, 1.25)  # fixed so curves from different shifts share a grid


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _timing(out: Path, name: str, started: float) -> None:
    _write(out / "logs" / f"timing_{name}.json", _dump({"seconds": round(time.time() - started, 3)}))


# -- data -----------------------------------------------------------------

def data_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.dataset.manifest_dir) if cfg.dataset.manifest_dir else out / "data"


def cmd_generate(cfg: RunConfig, out) -> Path:
    out = Path(out)
    root = data_dir(cfg, out)
    synth = cfg.synth_config()
    write_dataset(root, generate(synth), synth, cfg.fractions(), seed=cfg.data_seed)
    return root


def load_splits(cfg: RunConfig, out) -> dict[str, SegData]:
    """Splits as read back from disk (float32-quantised), generating them first if absent."""
    out = Path(out)
    root = data_dir(cfg, out)
    if not dataset_exists(root):
        if cfg.dataset.manifest_dir:
            raise PathError(f"no train/val/test manifests in {root}")
        cmd_generate(cfg, out)
    return {s: load_split(root / f"{s}.json", cfg.model.num_classes) for s in ("train", "val", "test")}


# -- training -------------------------------------------------------------

def _sgd_config(cfg: RunConfig, n: int) -> TrainConfig:
    m = cfg.method
    return TrainConfig(batch_size=m.batch_size, epochs=m.epochs, lr=m.lr, momentum=m.momentum,
                       weight_decay=cfg.model.weight_decay, seed=cfg.train_seed, dataset_size=n)


def csghmc_schedule(cfg: RunConfig, n: int) -> CyclicalSchedule:
    m = cfg.method
    return CyclicalSchedule(lr0=m.lr0, cycle_length=m.cycle_length,
                            steps_per_epoch=steps_per_epoch(n, m.batch_size),
                            total_epochs=m.cycles * m.cycle_length, burn_in_epochs=m.burn_in_epochs,
                            noise_start_epoch=m.noise_start_epoch, num_samples=m.samples)


def select_dropout_rate(map_theta, cfg: RunConfig, val: SegData) -> tuple[float, dict]:
    """Evaluation dropout rate with the best clean validation Dice (ties go to the lower rate)."""
    model_cfg = cfg.model_config()
    clean = ShiftSpec("none", 0.0, cfg.seed)
    scores = {}
    for rate in cfg.method.dropout_grid():
        ens = sample_mcd(map_theta, cfg.method.samples, rate, np.random.default_rng(cfg.train_seed), model_cfg)
        scores[rate] = evaluate_shift(ens, val, clean, cfg.model.num_classes).row.dice_mean
    best = max(scores, key=lambda r: (scores[r], -r))
    return best, {str(r): v for r, v in scores.items()}


def train_method(cfg: RunConfig, train: SegData, val: SegData | None = None) -> PosteriorEnsemble:
    m = cfg.method
    model_cfg = cfg.model_config()
    n = len(train)
    if m.name == "cSGHMC":
        if m.train_dropout_rate is None:
            model_cfg = replace(model_cfg, dropout_rate=0.0)
        problem = SegProblem(train, model_cfg, pixel_sum=m.pixel_likelihood == "sum")
        tc = TrainConfig(batch_size=m.batch_size, epochs=m.cycles * m.cycle_length, lr=m.lr0,
                         momentum=m.beta, weight_decay=cfg.model.weight_decay, seed=cfg.train_seed,
                         dataset_size=n)
        return train_csghmc(problem, csghmc_schedule(cfg, n), tc)
    problem = SegProblem(train, model_cfg)
    if m.name == "DE":
        return train_deep_ensemble(problem, cfg.de_seeds(), _sgd_config(cfg, n))
    ens = train_map(problem, _sgd_config(cfg, n))
    if m.name == "MCD":
        rate, scores = m.eval_dropout_rate, None
        if rate is None:
            if val is None:
                raise ConfigError("choosing method.eval_dropout_rate needs a validation split")
            rate, scores = select_dropout_rate(ens.thetas[0], cfg, val)
        mcd = sample_mcd(ens.thetas[0], m.samples, rate, np.random.default_rng(cfg.train_seed), model_cfg)
        mcd.meta = {**ens.meta, "val_dice_by_dropout_rate": scores}
        return mcd
    return ens


def model_dir(cfg: RunConfig, out) -> Path:
    return Path(out) / "models" / cfg.method.name


def cmd_train(cfg: RunConfig, out) -> Path:
    """Train the configured method; returns the ensemble manifest path."""
    out = Path(out)
    started = time.time()
    splits = load_splits(cfg, out)
    ens = train_method(cfg, splits["train"], splits["val"])
    ens.meta["provenance"] = cfg.provenance()
    mdir = model_dir(cfg, out)
    manifest = save_ensemble(mdir, ens)
    rows = ["member,epoch,loss"]
    for member, losses in enumerate(ens.meta.get("epoch_losses", [])):
        rows += [f"{member},{e},{l:.6f}" for e, l in enumerate(losses)]
    _write(mdir / "losses.csv", "\n".join(rows) + "\n")
    if ens.method == "cSGHMC":
        sched = csghmc_schedule(cfg, len(splits["train"]))
        _write(mdir / "run.json", _dump({
            "schedule": asdict(sched), "beta": cfg.method.beta,
            "snapshot_epochs": ens.meta["snapshot_epochs"], "snapshot_cycles": ens.meta["snapshot_cycles"],
            "samples": [f"sample_{c}.bin" for c in ens.meta["snapshot_cycles"]]}))
    _timing(out, f"train_{cfg.method.name}", started)
    return manifest


# -- evaluation -----------------------------------------------------------

@dataclass
class ShiftResult:
    spec: ShiftSpec
    row: MetricRow
    aggregates: list[float | None]
    reliability: ReliabilityBins
    entropy: np.ndarray  # [N, H, W]
    histogram: dict | None = None

    @property
    def mean_entropy(self) -> float | None:
        vals = [a for a in self.aggregates if a is not None]
        return float(np.mean(vals)) if vals else None


@dataclass
class Report:
    method: str
    results: list[ShiftResult] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def rows(self) -> list[MetricRow]:
        return [r.row for r in self.results]

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "rows": [asdict(r) for r in self.rows],
            "mean_entropy": {r.spec.label: r.mean_entropy for r in self.results},
            "histograms": {r.spec.label: r.histogram for r in self.results},
            "reliability": {r.spec.label: r.reliability.to_json() for r in self.results},
            "shifts": [r.spec.to_json() for r in self.results],
            "provenance": self.provenance,
        }


def shifted_inputs(data: SegData, spec: ShiftSpec) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([apply_shift(img, replace(spec, seed=spec.seed + i)) for i, img in enumerate(data.images)])
    labels = np.stack([shift_labels(lab, spec) for lab in data.labels])
    return images, labels


def evaluate_shift(ens: PosteriorEnsemble, data: SegData, spec: ShiftSpec, num_classes: int,
                   ece_bins: int = 15, hist_bins: int = 10) -> ShiftResult:
    images, labels = shifted_inputs(data, spec)
    probs = member_probs(ens, images).mean(axis=0)  # [N, C, H, W]
    per_dice, dice_means, nlls, briers, eces, bins, aggs, ents = [], [], [], [], [], [], [], []
    for p, lab in zip(probs, labels):
        pred = p.argmax(axis=0)
        d, dm = dice(pred, lab, num_classes)
        per_dice.append(d)
        dice_means.append(dm)
        nlls.append(nll(p, lab))
        briers.append(brier(p, lab))
        e, b = ece(p, lab, ece_bins)
        eces.append(e)
        bins.append(b)
        h = predictive_entropy(p)
        ents.append(h)
        aggs.append(aggregate_uncertainty(UncMap(h, pred, lab)))
    row = MetricRow(ens.method, spec.kind, spec.level, np.mean(per_dice, axis=0).tolist(),
                    float(np.mean(dice_means)), float(np.mean(nlls)), float(np.mean(briers)),
                    float(np.mean(eces)))
    result = ShiftResult(spec, row, aggs, ReliabilityBins.merge(bins), np.stack(ents))
    try:
        hist = entropy_histogram(aggs, hist_bins, num_classes)
        result.histogram = {"edges": hist.edges.tolist(), "counts": hist.counts.tolist()}
    except EmptyResultError:
        result.histogram = None
    return result


def evaluation_specs(cfg: RunConfig) -> list[ShiftSpec]:
    return [ShiftSpec("none", 0.0, cfg.seed)] + list(cfg.shifts)


def cmd_evaluate(cfg: RunConfig, out, ensemble_path=None) -> Report:
    out = Path(out)
    started = time.time()
    manifest = Path(ensemble_path) if ensemble_path else model_dir(cfg, out) / "ensemble.json"
    ens = load_ensemble(manifest)
    test = load_splits(cfg, out)["test"]
    c = cfg.model.num_classes
    report = Report(ens.method, provenance={
        **cfg.provenance(), "method": ens.method, "ensemble_size": ens.size, "version": __version__,
        "test_images": len(test)})
    for spec in evaluation_specs(cfg):
        report.results.append(evaluate_shift(ens, test, spec, c, cfg.eval.ece_bins, cfg.eval.hist_bins))
    write_report(report, out / "reports", test, cfg)
    _timing(out, f"evaluate_{ens.method}", started)
    return report


def write_report(report: Report, rdir: Path, test: SegData, cfg: RunConfig) -> None:
    m = report.method
    lines = [MetricRow.CSV_HEADER] + [r.csv_line() for r in report.rows]
    _write(rdir / f"metrics_{m}.csv", "\n".join(lines) + "\n")
    agg = ["image_id,method,shift,entropy"]
    for res in report.results:
        for i, a in enumerate(res.aggregates):
            agg.append(f"{i},{m},{res.spec.label}," + ("NA" if a is None else f"{a:.6f}"))
        if res.histogram is not None:
            hist_lines = ["bin_left_edge,count"] + [
                f"{e:.6f},{n}" for e, n in zip(res.histogram["edges"][:-1], res.histogram["counts"])]
            _write(rdir / f"hist_{m}_{res.spec.label}.csv", "\n".join(hist_lines) + "\n")
        save_tensor(rdir / "entropy" / f"{m}_{res.spec.label}.bin", res.entropy)
        images, _ = shifted_inputs(test, res.spec)
        _write(rdir / f"kde_{res.spec.label}.csv", kde(images.ravel(), np.linspace(*KDE_RANGE, cfg.eval.kde_points)).to_csv())
    _write(rdir / f"aggregates_{m}.csv", "\n".join(agg) + "\n")
    _write(rdir / f"reliability_{m}.json",
           _dump({r.spec.label: r.reliability.to_json() for r in report.results}))
    _write(rdir / f"report_{m}.json", _dump(report.to_json()))


# -- diversity ------------------------------------------------------------

def cmd_diversity(cfg: RunConfig, out, ensemble_path=None, subset: int | None = -1) -> dict:
    out = Path(out)
    manifest = Path(ensemble_path) if ensemble_path else model_dir(cfg, out) / "ensemble.json"
    ens = load_ensemble(manifest)
    test = load_splits(cfg, out)["test"]
    size = cfg.eval.diversity_subset if subset == -1 else subset
    corr = diversity_matrix(ens, test.images, size, np.random.default_rng(cfg.seed))
    rdir = out / "reports"
    _write(rdir / f"diversity_{ens.method}.csv", corr.to_csv())
    summary = {"method": ens.method, "members": corr.members, "mean_offdiag": corr.mean_offdiag(),
               "degenerate_members": corr.degenerate, "provenance": cfg.provenance()}
    _write(rdir / f"diversity_{ens.method}.json", _dump(summary))
    return summary


# -- oracles --------------------------------------------------------------

def cmd_oracle(cfg: RunConfig | None, out, lr_multiplier: float = 1.0, runs: int = 10) -> tuple[dict, bool]:
    """Moment check on the conjugate model plus the two-mode visit experiment."""
    out = Path(out)
    started = time.time()
    seed = cfg.seed if cfg is not None else 0
    reg = ConjugateLinReg.synthetic(seed=seed)
    moments = sghmc_vs_analytic(reg, OracleSamplerConfig(lr_multiplier=lr_multiplier, seed=seed))
    model = TwoModeModel.synthetic(seed=seed)
    tm_cfg = TwoModeConfig(lr0=TwoModeConfig.lr0 * lr_multiplier)
    csghmc_counts, sgd_counts, failures = [], [], []
    for s in range(runs):
        try:
            csghmc_counts.append(mode_visit_count(model, two_mode_csghmc(model, tm_cfg, seed + s).samples))
        except Exception as exc:  # divergence is a reported outcome, not a crash
            csghmc_counts.append(0)
            failures.append(f"cSGHMC run {s}: {exc}")
        sgd_counts.append(mode_visit_count(model, [two_mode_sgd(model, tm_cfg, seed + s).theta]))
    two_mode = {
        "csghmc_mode_counts": csghmc_counts, "sgd_mode_counts": sgd_counts,
        "csghmc_runs_with_both_modes": sum(c == 2 for c in csghmc_counts),
        "sgd_runs_with_one_mode": sum(c == 1 for c in sgd_counts),
        "failures": failures, "config": asdict(tm_cfg),
    }
    ok = (moments.passed()
          and two_mode["csghmc_runs_with_both_modes"] >= math.ceil(0.9 * runs)
          and two_mode["sgd_runs_with_one_mode"] == runs)
    report = {"moments": {**moments.to_json(), "passed": moments.passed()}, "two_mode": two_mode, "passed": ok,
              "lr_multiplier": lr_multiplier, "seed": seed}
    _write(out / "reports" / "oracle.json", _dump(report))
    _timing(out, "oracle", started)
    return report, ok


# -- full benchmark -------------------------------------------------------

def run_benchmark(cfg: RunConfig, out, methods=("MAP", "MCD", "DE", "cSGHMC")) -> dict[str, Report]:
    """generate → train → evaluate → diversity for each method on one shared dataset."""
    out = Path(out)
    started = time.time()
    if not dataset_exists(data_dir(cfg, out)):
        cmd_generate(cfg, out)
    reports = {}
    for name in methods:
        mcfg = replace(cfg, method=replace(cfg.method, name=name))
        log.info("benchmark: training %s", name)
        cmd_train(mcfg, out)
        reports[name] = cmd_evaluate(mcfg, out)
        if mcfg.eval.diversity_subset <= reports[name].provenance["ensemble_size"]:
            cmd_diversity(mcfg, out)
    _timing(out, "benchmark", started)
    return reports

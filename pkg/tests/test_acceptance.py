"""Acceptance criteria 1-8. Each test prints one ``[criterion N] PASS|FAIL ...`` line.

The desk-scale benchmark (all four methods, 7 blur levels) runs once per
session and takes a few minutes on one core.
"""

import math
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from uqshift import autodiff as ad
from uqshift import config, pipeline
from uqshift.analysis import UncMap, aggregate_uncertainty, entropy_histogram, pearson_matrix
from uqshift.metrics import brier, dice, ece, nll
from uqshift.models import ModelConfig, init
from uqshift.oracle import (ConjugateLinReg, OracleSamplerConfig, TwoModeConfig, TwoModeModel,
                            analytic_posterior, mode_visit_count, sghmc_vs_analytic, two_mode_csghmc,
                            two_mode_sgd)
from uqshift.shifts import KINDS, ShiftSpec, apply_shift, kde, scott_bandwidth
from uqshift.uq_methods import load_ensemble, member_probs, sample_mcd

import naive
from conftest import gradcheck

ROOT = Path(__file__).resolve().parents[1]
METHODS = ("MAP", "MCD", "DE", "cSGHMC")


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    cfg = config.load(ROOT / "configs" / "benchmark.cfg")
    out = tmp_path_factory.mktemp("benchmark")
    t0 = time.time()
    reports = pipeline.run_benchmark(cfg, out, METHODS)
    return cfg, out, reports, time.time() - t0


def test_criterion_1_sghmc_moments(report):
    t0 = time.time()
    rep = sghmc_vs_analytic(ConjugateLinReg.synthetic(), OracleSamplerConfig())
    secs = time.time() - t0
    ok = (rep.num_draws >= 2000 and max(rep.mean_rel_err) < 0.05
          and max(rep.cov_diag_rel_err) < 0.20 and secs < 60)
    report(1, ok, f"mean rel err {max(rep.mean_rel_err):.4f} (<0.05), cov diag rel err "
                  f"{max(rep.cov_diag_rel_err):.4f} (<0.20), {rep.num_draws} draws, {secs:.1f}s (<60s)")


def test_criterion_2_two_modes(report):
    t0 = time.time()
    model, cfg = TwoModeModel.synthetic(), TwoModeConfig()
    assert cfg.cycles >= 8
    both = sum(mode_visit_count(model, two_mode_csghmc(model, cfg, s).samples) == 2 for s in range(10))
    single = sum(mode_visit_count(model, [two_mode_sgd(model, cfg, s).theta]) == 1 for s in range(10))
    secs = time.time() - t0
    report(2, both >= 9 and single == 10 and secs < 120,
           f"cSGHMC ({cfg.cycles} cycles) visited both modes in {both}/10 runs (>=9), "
           f"SGD one mode in {single}/10 (10), {secs:.1f}s (<120s)")


def _op_checks():
    r = np.random.default_rng(0)
    w = lambda *s: ad.Tensor(r.normal(size=s))
    x34, y = r.normal(size=(3, 4, 4)), r.integers(0, 3, size=(4, 4))
    pos = r.uniform(0.5, 2, size=(3, 4))
    t344, t244 = w(3, 4, 4), w(2, 4, 4)
    checks = {
        "add": (lambda a, b: ad.tsum((a + b) * (a + b)), [r.normal(size=(3, 4)), r.normal(size=4)]),
        "neg": (lambda a: ad.tsum(-a * a), [r.normal(size=5)]),
        "mul": (lambda a, b: ad.tsum(a * b * a), [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
        "log": (lambda a: ad.tsum(ad.log(a)), [pos]),
        "relu": (lambda a: ad.tsum(ad.relu(a) * ad.Tensor(pos)), [pos - 1.25 + 1e-3]),
        "sum/mean": (lambda a: ad.tmean(a * a) + ad.tsum(a), [r.normal(size=(2, 5))]),
        "matmul": (lambda a, b: ad.tsum(ad.matmul(a, b) * ad.Tensor(np.arange(6.0).reshape(3, 2))),
                   [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        "conv2d": (lambda a, k, b: ad.tsum(ad.conv2d(a, k, b, padding=1) * t344),
                   [r.normal(size=(2, 4, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]),
        "max_pool2d/upsample/concat": (
            lambda a: ad.tsum(ad.concat([ad.upsample_nearest(ad.max_pool2d(a)), a]) * ad.Tensor(
                np.concatenate([t244.data, t244.data]))), [r.normal(size=(2, 4, 4))]),
        "dropout": (lambda a: ad.tsum(ad.dropout(a, 0.3, True, np.random.default_rng(5)) * a),
                    [r.normal(size=(3, 3))]),
        "softmax+cross_entropy": (lambda a: ad.cross_entropy(ad.softmax(a), y), [x34.copy()]),
        "softmax_cross_entropy": (lambda a: ad.softmax_cross_entropy(a, y), [x34.copy()]),
        "log_softmax": (lambda a: ad.tsum(ad.log_softmax(a) * t344), [x34.copy()]),
    }
    return {name: gradcheck(f, arrays) for name, (f, arrays) in checks.items()}


def test_criterion_3_gradients(report):
    errs = _op_checks()
    cfg = ModelConfig(base_channels=2, depth=2, dropout_rate=0.2, seed=3)
    net = init(cfg)
    r = np.random.default_rng(0)
    x, y = r.random((2, 1, 8, 8)), r.integers(0, 3, size=(2, 8, 8))
    # off-kink point: zero biases put dead-ReLU units exactly on the ReLU kink
    theta = net.flatten() + 0.05 * r.normal(size=net.num_params)
    _, analytic = net.load_flat(theta).loss_and_grad(x, y, np.random.default_rng(7))
    numeric = ad.numerical_gradient(
        lambda: net.load_flat(theta).loss_and_grad(x, y, np.random.default_rng(7))[0], theta)
    errs["SegNet loss (all params)"] = ad.max_relative_error(analytic, numeric, floor=1e-6)
    worst = max(errs, key=errs.get)
    report(3, errs[worst] < 1e-4, f"{len(errs)} checks, worst {worst} max rel err {errs[worst]:.2e} (<1e-4)")


def test_criterion_4_metric_oracles(report):
    r = np.random.default_rng(42)
    worst = {k: 0.0 for k in ("NLL", "BS", "ECE", "Dice", "KDE", "histogram", "Pearson", "posterior")}
    for _ in range(50):
        p = r.dirichlet(np.ones(3), size=(3, 4)).transpose(2, 0, 1)
        yl = r.integers(0, 3, size=(3, 4))
        worst["NLL"] = max(worst["NLL"], abs(nll(p, yl) - naive.nll(p, yl)))
        worst["BS"] = max(worst["BS"], abs(brier(p, yl) - naive.brier(p, yl)))
        worst["ECE"] = max(worst["ECE"], abs(ece(p, yl)[0] - naive.ece(p, yl)))
        pred = r.integers(0, 3, size=(5, 5))
        gt = r.integers(0, 3, size=(5, 5))
        worst["Dice"] = max(worst["Dice"], float(np.max(np.abs(dice(pred, gt, 3)[0] - naive.dice(pred, gt, 3)))))
        vals, grid = r.normal(size=10), np.linspace(-3, 3, 30)
        ref = naive.kde(vals, grid, scott_bandwidth(vals))
        worst["KDE"] = max(worst["KDE"], float(np.max(np.abs(kde(vals, grid).density - ref))))
        agg = r.uniform(0, math.log(3), size=100).tolist()
        counts = entropy_histogram(agg, 10).counts.tolist()
        worst["histogram"] = max(worst["histogram"], float(counts != naive.histogram(agg, 10, math.log(3))))
        outs = r.random((3, 20))
        m = pearson_matrix(outs).matrix
        worst["Pearson"] = max(worst["Pearson"], max(abs(m[i, j] - naive.pearson(outs[i].tolist(), outs[j].tolist()))
                                                     for i in range(3) for j in range(3) if i != j))
        X, yy = r.normal(size=(6, 2)), r.normal(size=6)
        mean, cov = analytic_posterior(ConjugateLinReg(X, yy, 1.5, 2.0))
        prec = np.array([[1.5 + 2 * X[:, 0] @ X[:, 0], 2 * X[:, 0] @ X[:, 1]],
                         [2 * X[:, 0] @ X[:, 1], 1.5 + 2 * X[:, 1] @ X[:, 1]]])
        det = prec[0, 0] * prec[1, 1] - prec[0, 1] ** 2
        ncov = np.array([[prec[1, 1], -prec[0, 1]], [-prec[0, 1], prec[0, 0]]]) / det
        nmean = ncov @ (2 * X.T @ yy)
        worst["posterior"] = max(worst["posterior"], float(np.max(np.abs(cov - ncov))),
                                 float(np.max(np.abs(mean - nmean))))
    ok = all(v <= 1e-12 for k, v in worst.items() if k != "posterior") and worst["posterior"] <= 1e-10
    report(4, ok, "50 instances each; max abs diff " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + " (<=1e-12, posterior <=1e-10)")


def _blur_results(rep):
    return [r for r in rep.results if r.spec.kind == "blur"]


def test_criterion_5_trends(report, benchmark):
    cfg, _, reports, secs = benchmark
    lines, ok = [], secs < 30 * 60
    for m in METHODS:
        clean, top = reports[m].results[0].row.dice_mean, _blur_results(reports[m])[-1].row.dice_mean
        ok &= top < clean
        lines.append(f"{m} Dice {clean:.3f}->{top:.3f}")
    blur = _blur_results(reports["cSGHMC"])
    levels, ent = [r.spec.level for r in blur], [r.mean_entropy for r in blur]
    rho = stats.spearmanr(levels, ent).statistic
    ok &= len(blur) == 7 and rho >= 0.8 and reports["cSGHMC"].provenance["ensemble_size"] == 8
    report(5, ok, "; ".join(lines) + f"; cSGHMC entropy Spearman {rho:.3f} (>=0.8) over 7 blur levels; "
                                     f"benchmark {secs:.0f}s (<1800s)")


def test_criterion_6_calibration_drift(report, benchmark):
    _, _, reports, _ = benchmark
    ok, lines = True, []
    for m in METHODS:
        clean, top = reports[m].results[0].row.ece, _blur_results(reports[m])[-1].row.ece
        ok &= top > clean
        lines.append(f"{m} ECE {clean:.4f}->{top:.4f}")
    report(6, ok, "; ".join(lines))


def test_criterion_7_degenerate_cases(report, benchmark):
    cfg, out, reports, _ = benchmark
    problems = []
    fields = 0
    for m in METHODS:
        for res in reports[m].results:
            fields += 1
            if not (np.all(res.entropy >= 0) and np.all(res.entropy <= math.log(3))):
                problems.append(f"entropy out of bounds for {m} {res.spec.label}")
    map_ens = load_ensemble(out / "models" / "MAP" / "ensemble.json")
    test = pipeline.load_splits(cfg, out)["test"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mcd0 = sample_mcd(map_ens.thetas[0], 8, 0.0, np.random.default_rng(0), map_ens.config)
    map_p = member_probs(map_ens, test.images)[0]
    if any(p.tobytes() != map_p.tobytes() for p in member_probs(mcd0, test.images)):
        problems.append("MCD at rate 0 differs from MAP")
    img = test.images[0]
    for kind in KINDS:
        if apply_shift(img, ShiftSpec(kind, 0.0, 3)).tobytes() != img.tobytes():
            problems.append(f"{kind} at level 0 is not bit-identical")
    bg = np.zeros((32, 32), dtype=int)
    if aggregate_uncertainty(UncMap(np.full((32, 32), 0.5), bg, bg)) is not None:
        problems.append("aggregate present on an all-background image")
    report(7, not problems, "; ".join(problems) or
           f"entropy within [0, ln 3] on {fields} evaluated fields; MCD(p=0)==MAP bytewise; "
           f"{len(KINDS)} shift kinds identity at level 0; all-background aggregate absent")


def test_criterion_8_determinism(report, tmp_path):
    cfg_path = ROOT / "configs" / "quick.cfg"
    for run in ("a", "b"):  # separate processes, as two real executions would be
        for cmd in ("generate-data", "train", "evaluate"):
            subprocess.run([sys.executable, "-m", "uqshift.cli", cmd, "--config", str(cfg_path),
                            "--out", str(tmp_path / run)], check=True, capture_output=True)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "reports").rglob("*") if p.is_file())
    other = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b" / "reports").rglob("*") if p.is_file())
    diff = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    report(8, files == other and files and not diff,
           f"{len(files)} report files compared, {len(diff)} differ" + (f": {diff}" if diff else ""))

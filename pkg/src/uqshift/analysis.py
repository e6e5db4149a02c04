"""Uncertainty aggregation, entropy histograms and ensemble-diversity matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyResultError, ValidationError
from .uq_methods import member_probs


@dataclass
class UncMap:
    entropy: np.ndarray  # [H, W]
    pred: np.ndarray
    gt: np.ndarray


def aggregate_uncertainty(unc: UncMap) -> float | None:
    """Mean entropy over TP, FP and FN foreground pixels; ``None`` if there are none.

    True negatives (predicted and labelled background) never enter the mean.
    """
    scored = (np.asarray(unc.pred) != 0) | (np.asarray(unc.gt) != 0)
    if not scored.any():
        return None
    return float(np.asarray(unc.entropy)[scored].mean())


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def to_csv(self) -> str:
        rows = ["bin_left_edge,count"] + [f"{e:.6f},{int(c)}" for e, c in zip(self.edges[:-1], self.counts)]
        return "\n".join(rows) + "\n"


def entropy_histogram(aggregates, num_bins: int = 10, num_classes: int = 3) -> Histogram:
    """Equal-width histogram over ``[0, ln C]``; ``None`` aggregates are skipped."""
    values = np.asarray([a for a in aggregates if a is not None], dtype=np.float64)
    if values.size == 0:
        raise EmptyResultError("no image had TP/FP/FN pixels to aggregate")
    if num_bins < 1:
        raise ValidationError("num_bins must be >= 1")
    top = math.log(num_classes)
    edges = np.linspace(0.0, top, num_bins + 1)
    idx = np.clip(np.floor(values / top * num_bins).astype(int), 0, num_bins - 1)
    return Histogram(edges, np.bincount(idx, minlength=num_bins))


@dataclass
class CorrMatrix:
    matrix: np.ndarray
    members: list[int] = field(default_factory=list)
    degenerate: list[int] = field(default_factory=list)  # members with constant output

    def mean_offdiag(self) -> float:
        s = self.matrix.shape[0]
        if s < 2:
            return 1.0
        return float((self.matrix.sum() - np.trace(self.matrix)) / (s * (s - 1)))

    def to_csv(self) -> str:
        return "\n".join(",".join(f"{v:.6f}" for v in row) for row in self.matrix) + "\n"


def pearson_matrix(outputs) -> CorrMatrix:
    """Pearson correlation between rows of ``outputs`` ``[S, P]``.

    A constant row correlates 1 with an identical constant row and 0 with
    anything else; such rows are listed in ``degenerate``.
    """
    x = np.asarray(outputs, dtype=np.float64)
    s = x.shape[0]
    centred = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centred * centred, axis=1))
    const = norms == 0
    safe = np.where(const, 1.0, norms)
    corr = (centred @ centred.T) / np.outer(safe, safe)
    corr = np.clip(corr, -1.0, 1.0)
    for i in np.flatnonzero(const):
        for j in range(s):
            corr[i, j] = corr[j, i] = 1.0 if const[j] and np.array_equal(x[i], x[j]) else 0.0
    np.fill_diagonal(corr, 1.0)
    corr = 0.5 * (corr + corr.T)
    return CorrMatrix(corr, list(range(s)), np.flatnonzero(const).tolist())


def select_members(ensemble, subset: int | None, rng: np.random.Generator) -> list[int]:
    """Member indices for a diversity plot: the last cycles for cSGHMC, a random pick otherwise."""
    s = ensemble.size
    if subset is None or subset == s:
        return list(range(s))
    if subset > s:
        raise ValidationError(f"subset size {subset} exceeds ensemble size {s}")
    if ensemble.method == "cSGHMC":
        return list(range(s - subset, s))
    return sorted(rng.choice(s, size=subset, replace=False).tolist())


def diversity_matrix(ensemble, probe_images, subset: int | None = 6,
                     rng: np.random.Generator | None = None) -> CorrMatrix:
    """Pearson correlation of concatenated softmax outputs for each member pair."""
    chosen = select_members(ensemble, subset, rng or np.random.default_rng(0))
    probs = member_probs(ensemble, np.asarray(probe_images))  # [S, N, C, H, W]
    outputs = probs[chosen].reshape(len(chosen), -1)
    corr = pearson_matrix(outputs)
    corr.members = chosen
    corr.degenerate = [chosen[i] for i in corr.degenerate]
    return corr


def _ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(1, len(x) + 1)
    for v in np.unique(x):  # ties share their average rank
        tie = x == v
        ranks[tie] = ranks[tie].mean()
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation (Pearson on average ranks); ``nan`` if either side is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValidationError("spearman needs two equal-length 1-D sequences of length >= 2")
    rx, ry = _ranks(x) - (len(x) + 1) / 2, _ranks(y) - (len(y) + 1) / 2
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    return float(rx @ ry / denom) if denom > 0 else float("nan")

"""Segmentation and calibration metrics on per-pixel class probabilities.

Probability fields are ``[C, H, W]`` arrays; label fields are ``[H, W]``
integer class ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError

PROB_FLOOR = 1e-12


def _flat(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim < 2 or probs.shape[1:] != labels.shape:
        raise DimensionError(f"probs {probs.shape} and labels {labels.shape} disagree")
    c = probs.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"labels must lie in [0, {c})")
    return probs.reshape(c, -1), labels.reshape(-1).astype(np.intp)


def dice(pred_labels, gt_labels, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class Dice and the mean over foreground classes (class 0 excluded).

    A class absent from both prediction and ground truth scores 1.
    """
    pred, gt = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    for arr in (pred, gt):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError(f"labels must lie in [0, {num_classes})")
    scores = np.empty(num_classes)
    for c in range(num_classes):
        p, g = pred == c, gt == c
        denom = p.sum() + g.sum()
        scores[c] = 1.0 if denom == 0 else 2.0 * np.logical_and(p, g).sum() / denom
    return scores, float(scores[1:].mean()) if num_classes > 1 else float(scores[0])


def nll(probs, labels) -> float:
    p, y = _flat(probs, labels)
    picked = p[y, np.arange(y.size)]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def brier(probs, labels) -> float:
    p, y = _flat(probs, labels)
    onehot = np.zeros_like(p)
    onehot[y, np.arange(y.size)] = 1.0
    return float(np.mean(np.sum((p - onehot) ** 2, axis=0)))


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray  # mean confidence per bin (0 for empty bins)
    accuracy: np.ndarray    # empirical accuracy per bin (0 for empty bins)

    def to_json(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(),
                "confidence": self.confidence.tolist(), "accuracy": self.accuracy.tolist()}

    @staticmethod
    def merge(bins: list["ReliabilityBins"]) -> "ReliabilityBins":
        counts = sum(b.counts for b in bins)
        safe = np.maximum(counts, 1)
        conf = sum(b.confidence * b.counts for b in bins) / safe
        acc = sum(b.accuracy * b.counts for b in bins) / safe
        return ReliabilityBins(bins[0].edges.copy(), counts, conf, acc)


def confidence_and_correct(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p, y = _flat(probs, labels)
    return p.max(axis=0), (p.argmax(axis=0) == y)


def reliability_bins(confidence, correct, num_bins: int = 15) -> ReliabilityBins:
    if num_bins < 1:
        raise ValidationError("num_bins must be >= 1")
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    # bins are (lo, hi]; confidence 0 falls in the first bin
    idx = np.clip(np.ceil(confidence * num_bins).astype(int) - 1, 0, num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins)
    safe = np.maximum(counts, 1)
    conf = np.bincount(idx, weights=confidence, minlength=num_bins) / safe
    acc = np.bincount(idx, weights=correct, minlength=num_bins) / safe
    return ReliabilityBins(edges, counts, conf, acc)


def ece_from_bins(bins: ReliabilityBins) -> float:
    total = bins.counts.sum()
    if total == 0:
        return 0.0
    return float(np.sum(bins.counts / total * np.abs(bins.accuracy - bins.confidence)))


def ece(probs, labels, num_bins: int = 15) -> tuple[float, ReliabilityBins]:
    """Expected calibration error of the top-class confidence over equal-width bins."""
    bins = reliability_bins(*confidence_and_correct(probs, labels), num_bins=num_bins)
    return ece_from_bins(bins), bins


@dataclass
class MetricRow:
    method: str
    shift_kind: str
    shift_level: float
    dice_per_class: list[float] = field(default_factory=list)
    dice_mean: float = 0.0
    nll: float = 0.0
    brier: float = 0.0
    ece: float = 0.0

    CSV_HEADER = "method,shift_kind,shift_level,dice_mean,dice_c1,dice_c2,nll,brier,ece"

    def csv_line(self) -> str:
        vals = [self.shift_level, self.dice_mean, *self.dice_per_class[1:3], self.nll, self.brier, self.ece]
        return ",".join([self.method, self.shift_kind] + [f"{v:.6f}" for v in vals])

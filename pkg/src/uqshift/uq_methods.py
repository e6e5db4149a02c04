"""cSGHMC, MC dropout, deep ensembles and MAP as producers of a PosteriorEnsemble."""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import softmax_array
from .data import SegData
from .errors import ConfigError, PathError, UsageError, ValidationError
from .models import ModelConfig, SegNet, init, load_checkpoint, save_checkpoint
from .samplers import CyclicalSchedule, TrainConfig, run_csghmc, run_sgd, steps_per_epoch

METHODS = ("cSGHMC", "MCD", "DE", "MAP")


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("UQSHIFT_THREADS", "1")))
    except ValueError:
        return 1


class SegProblem:
    """Adapts a dataset and model config to the sampler problem interface.

    ``pixel_sum=True`` makes the per-image loss the summed pixel NLL (the
    image's full log-likelihood) instead of the pixel mean.
    """

    def __init__(self, data: SegData, config: ModelConfig, pixel_sum: bool = False):
        self.data = data
        self.config = config
        self.pixel_sum = pixel_sum
        self.net = SegNet(config)

    @property
    def n(self) -> int:
        return len(self.data)

    def init_params(self, seed: int) -> np.ndarray:
        return init(replace(self.config, seed=seed)).flatten()

    def loss_and_grad(self, theta, idx, rng=None):
        self.net.load_flat(theta)
        loss, grad = self.net.loss_and_grad(self.data.images[idx], self.data.labels[idx], rng, mode="train")
        if self.pixel_sum:
            pixels = self.data.labels[0].size
            return loss * pixels, grad * pixels
        return loss, grad

    def clone(self) -> "SegProblem":
        return SegProblem(self.data, self.config, self.pixel_sum)


@dataclass
class PosteriorEnsemble:
    method: str
    config: ModelConfig
    thetas: list[np.ndarray]
    seeds: list[int] = field(default_factory=list)  # MCD: one dropout seed per member
    dropout_rate: float = 0.0  # MCD evaluation-time rate
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        lengths = {np.asarray(t).size for t in self.thetas}
        if len(lengths) > 1:
            raise ValidationError("ensemble members have different parameter counts")

    @property
    def size(self) -> int:
        return len(self.seeds) if self.method == "MCD" else len(self.thetas)

    def member_nets(self) -> list[SegNet]:
        return [SegNet(self.config).load_flat(t) for t in self.thetas]


# -- producers ------------------------------------------------------------

def train_map(problem, train_cfg: TrainConfig, config: ModelConfig | None = None) -> PosteriorEnsemble:
    """Single SGD-with-momentum run: the point estimate."""
    seed = train_cfg.seed
    res = run_sgd(problem, problem.init_params(seed), train_cfg, np.random.default_rng(seed))
    return PosteriorEnsemble("MAP", config or problem.config, [res.theta],
                             meta={"epoch_losses": [res.epoch_losses], "seeds": [seed]})


def train_deep_ensemble(problem, seeds, train_cfg: TrainConfig, config: ModelConfig | None = None,
                        allow_duplicate_seeds: bool = False) -> PosteriorEnsemble:
    """Independent SGD runs differing only in seed (initialisation and shuffling)."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValidationError("a deep ensemble needs at least 2 members")
    if not allow_duplicate_seeds and len(set(seeds)) != len(seeds):
        raise ValidationError(f"deep-ensemble seeds must be distinct, got {seeds}")

    def member(seed):
        p = problem.clone() if hasattr(problem, "clone") else problem
        cfg = replace(train_cfg, seed=seed)
        return run_sgd(p, p.init_params(seed), cfg, np.random.default_rng(seed))

    workers = min(max_threads(), len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(member, seeds))
    else:
        results = [member(s) for s in seeds]
    return PosteriorEnsemble("DE", config or problem.config, [r.theta for r in results],
                             meta={"epoch_losses": [r.epoch_losses for r in results], "seeds": seeds})


def sample_mcd(map_params, num_samples: int, dropout_rate: float, rng: np.random.Generator,
               config: ModelConfig) -> PosteriorEnsemble:
    """Record one parameter vector plus ``num_samples`` distinct dropout seeds."""
    if isinstance(map_params, PosteriorEnsemble):
        map_params = map_params.thetas[0]
    if num_samples < 1:
        raise ValidationError("num_samples must be >= 1")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValidationError("dropout_rate must lie in [0, 1)")
    if dropout_rate == 0.0:
        warnings.warn("MC dropout with rate 0 yields identical members", RuntimeWarning, stacklevel=2)
    seeds: list[int] = []
    while len(seeds) < num_samples:
        s = int(rng.integers(0, 2**31 - 1))
        if s not in seeds:
            seeds.append(s)
    return PosteriorEnsemble("MCD", config, [np.asarray(map_params, dtype=np.float64)], seeds, dropout_rate)


def train_csghmc(problem, schedule: CyclicalSchedule, train_cfg: TrainConfig,
                 config: ModelConfig | None = None) -> PosteriorEnsemble:
    """Cyclical SGHMC; one lowest-loss snapshot from each of the final sampling cycles."""
    if schedule.available_samples() < schedule.num_samples:
        raise ConfigError(f"schedule yields only {schedule.available_samples()} post-burn-in cycles, "
                          f"{schedule.num_samples} samples requested")
    expected = steps_per_epoch(train_cfg.dataset_size or problem.n, train_cfg.batch_size)
    if schedule.steps_per_epoch != expected:
        raise ConfigError(f"schedule.steps_per_epoch={schedule.steps_per_epoch}, data gives {expected}")
    seed = train_cfg.seed
    res = run_csghmc(problem, problem.init_params(seed), schedule, train_cfg, np.random.default_rng(seed))
    return PosteriorEnsemble(
        "cSGHMC", config or problem.config, res.samples,
        meta={"epoch_losses": [res.epoch_losses], "snapshot_epochs": [s.epoch for s in res.snapshots],
              "snapshot_cycles": [s.cycle for s in res.snapshots], "seeds": [seed]})


# -- prediction -----------------------------------------------------------

def member_probs(ensemble: PosteriorEnsemble, images) -> np.ndarray:
    """Softmax outputs of every member: ``[S, C, H, W]`` or ``[S, N, C, H, W]``."""
    if ensemble.size == 0:
        raise UsageError("cannot predict with an empty ensemble")
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    if ensemble.method == "MCD":
        net = SegNet(ensemble.config).load_flat(ensemble.thetas[0])
        out = []
        for s in ensemble.seeds:
            # one mask realisation per member, reused for every image: a fixed thinned network
            per_image = [net.forward(img, "eval_stochastic", np.random.default_rng(s),
                                     dropout_rate=ensemble.dropout_rate).data for img in batch]
            out.append(softmax_array(np.stack(per_image), -3))
        probs = np.stack(out)
    else:
        probs = np.stack([softmax_array(net.forward(batch, "eval_deterministic").data, -3)
                          for net in ensemble.member_nets()])
    return probs[:, 0] if single else probs


def predictive_distribution(ensemble: PosteriorEnsemble, image) -> np.ndarray:
    """Mean of member softmax outputs (the Monte Carlo marginal)."""
    return member_probs(ensemble, image).mean(axis=0)


def predictive_entropy(probs, axis: int = -3) -> np.ndarray:
    """Natural-log entropy over the class axis with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = terms.sum(axis=axis)
    return np.clip(h, 0.0, math.log(p.shape[axis]))


def check_probfield(probs, tol: float = 1e-9) -> None:
    p = np.asarray(probs)
    if np.any(p < 0) or np.any(p > 1) or not np.allclose(p.sum(axis=-3), 1.0, atol=tol, rtol=0):
        raise ValidationError("not a valid probability field")


# -- persistence ----------------------------------------------------------

def save_ensemble(out_dir, ensemble: PosteriorEnsemble, name: str = "ensemble") -> Path:
    """Write member checkpoints and ``<name>.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if ensemble.method == "cSGHMC":
        cycles = ensemble.meta.get("snapshot_cycles", list(range(len(ensemble.thetas))))
        names = [f"sample_{c}.bin" for c in cycles]
    elif ensemble.method == "DE":
        names = [f"member_{i}.bin" for i in range(len(ensemble.thetas))]
    else:
        names = ["map.bin"]
    for fname, theta in zip(names, ensemble.thetas):
        save_checkpoint(out_dir / fname, ensemble.config, theta)
    manifest = {
        "method": ensemble.method,
        "S": ensemble.size,
        "checkpoints": names,
        "seeds": ensemble.seeds,
        "dropout_rate": ensemble.dropout_rate,
        "model": asdict(ensemble.config),
        "meta": ensemble.meta,
    }
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_ensemble(manifest_path) -> PosteriorEnsemble:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise PathError(f"ensemble manifest not found: {manifest_path}")
    man = json.loads(manifest_path.read_text())
    thetas, config = [], None
    for fname in man["checkpoints"]:
        ckpt = manifest_path.parent / fname
        if not ckpt.exists():
            raise PathError(f"missing checkpoint {ckpt}")
        config, theta = load_checkpoint(ckpt)
        thetas.append(theta)
    config = config or ModelConfig(**man["model"])
    return PosteriorEnsemble(man["method"], config, thetas, list(man.get("seeds", [])),
                             float(man.get("dropout_rate", 0.0)), man.get("meta", {}))

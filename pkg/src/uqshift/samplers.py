"""SGD with momentum and cyclical SGHMC over flat parameter vectors.

Training loops are written against a small duck-typed *problem* interface so
the same code drives the segmentation net and the analytic oracles::

    problem.n                                   # dataset size
    problem.init_params(seed) -> theta
    problem.loss_and_grad(theta, idx, rng) -> (mean data loss, its gradient)

The prior enters as an L2 term with coefficient ``weight_decay``. SGD adds
``weight_decay * theta`` to the mean-loss gradient; SGHMC uses the per-example
scaling ``grad_U = mean data gradient + (weight_decay / n) * theta`` and then
multiplies by ``n`` inside the momentum update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, TrainingError, ValidationError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 2
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 1e-4
    seed: int = 0
    dataset_size: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.dataset_size is not None and self.dataset_size < self.batch_size:
            raise ValidationError(f"dataset_size {self.dataset_size} smaller than batch_size {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.lr < 0 or self.epochs < 0:
            raise ValidationError("lr, epochs and weight_decay must be non-negative")


@dataclass
class CyclicalSchedule:
    lr0: float
    cycle_length: int  # epochs
    steps_per_epoch: int
    total_epochs: int
    burn_in_epochs: int = 0
    noise_start_epoch: int = 0
    num_samples: int = 20

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValidationError("lr0 must be > 0")
        if self.cycle_length < 1 or self.steps_per_epoch < 1:
            raise ValidationError("cycle_length and steps_per_epoch must be >= 1")
        if self.total_epochs % self.cycle_length:
            raise ValidationError(f"total_epochs {self.total_epochs} is not a whole number of "
                                  f"{self.cycle_length}-epoch cycles")
        if not 0 <= self.burn_in_epochs < self.total_epochs:
            raise ValidationError("burn_in_epochs must lie in [0, total_epochs)")
        if not 0 <= self.noise_start_epoch <= self.total_epochs:
            raise ValidationError("noise_start_epoch must lie in [0, total_epochs]")
        if self.num_samples < 1:
            raise ValidationError("num_samples must be >= 1")

    @property
    def steps_per_cycle(self) -> int:
        return self.cycle_length * self.steps_per_epoch

    @property
    def num_cycles(self) -> int:
        return self.total_epochs // self.cycle_length

    @property
    def first_sampling_cycle(self) -> int:
        first_clean = -(-self.burn_in_epochs // self.cycle_length)
        return max(first_clean, self.num_cycles - self.num_samples)

    def available_samples(self) -> int:
        return self.num_cycles - self.first_sampling_cycle

    def noise_on(self, epoch: int) -> bool:
        return epoch >= self.noise_start_epoch


def cyclic_lr(schedule: CyclicalSchedule, k: int) -> float:
    """Cosine step size restarting at ``lr0`` every ``cycle_length`` epochs."""
    kc = schedule.steps_per_cycle
    return schedule.lr0 / 2.0 * (math.cos(math.pi * (k % kc) / kc) + 1.0)


@dataclass
class SghmcState:
    theta: np.ndarray
    m: np.ndarray
    beta: float = 0.9
    k: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64)
        if self.theta.shape != self.m.shape:
            raise ValidationError("momentum and parameters must have the same length")
        if not 0.0 <= self.beta < 1.0:
            raise ValidationError("beta must lie in [0, 1)")

    @classmethod
    def start(cls, theta, beta: float = 0.9) -> "SghmcState":
        theta = np.array(theta, dtype=np.float64)
        return cls(theta, np.zeros_like(theta), beta)

    def next_position(self) -> np.ndarray:
        """Where the next gradient must be evaluated: ``theta + m``."""
        return self.theta + self.m


def sghmc_step(state: SghmcState, grad: np.ndarray, lr: float, noise_on: bool,
               rng: np.random.Generator | None, n: int = 1) -> SghmcState:
    """One SGHMC transition, in place.

    ``theta_k = theta_{k-1} + m_{k-1}`` followed by
    ``m_k = beta*m_{k-1} - (lr/2)*n*grad + sqrt((1-beta)*lr)*eps``, where
    ``grad`` is the estimator evaluated at ``theta_k`` (``state.next_position()``).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.theta.shape:
        raise ValidationError(f"gradient shape {grad.shape} != parameter shape {state.theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient", step=state.k)
    state.theta = state.theta + state.m
    m = state.beta * state.m - 0.5 * lr * n * grad
    if noise_on:
        m = m + math.sqrt((1.0 - state.beta) * lr) * rng.standard_normal(m.shape)
    state.m = m
    state.k += 1
    if not np.all(np.isfinite(state.theta)) or not np.all(np.isfinite(state.m)):
        raise NumericalError("chain diverged to non-finite values", step=state.k)
    return state


def sgd_momentum_step(theta, velocity, grad, lr: float, momentum: float = 0.99):
    theta, velocity, grad = (np.asarray(a, dtype=np.float64) for a in (theta, velocity, grad))
    if not theta.shape == velocity.shape == grad.shape:
        raise ValidationError("theta, velocity and grad must share a shape")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    velocity = momentum * velocity - lr * grad
    return theta + velocity, velocity


@dataclass(frozen=True)
class Snapshot:
    cycle: int
    epoch: int
    offset: int  # epoch index within the cycle


def collect_policy(schedule: CyclicalSchedule, epoch: int, cycle_losses) -> Snapshot | None:
    """Decide at the end of ``epoch`` whether the current cycle yields a sample.

    ``cycle_losses`` are the training losses of the epochs seen so far in the
    current cycle. A snapshot fires only on the last epoch of a sampling cycle
    and points at the epoch with minimal loss.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.burn_in_epochs or (epoch + 1) % schedule.cycle_length:
        return None
    cycle = epoch // schedule.cycle_length
    if cycle < schedule.first_sampling_cycle:
        return None
    losses = list(cycle_losses)
    if not losses:
        return None
    best = int(np.argmin(losses))
    return Snapshot(cycle, cycle * schedule.cycle_length + best, best)


# -- loops ---------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield perm[start:start + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(n // batch_size, 1)


@dataclass
class SgdResult:
    theta: np.ndarray
    epoch_losses: list[float] = field(default_factory=list)


def run_sgd(problem, theta0, cfg: TrainConfig, rng: np.random.Generator) -> SgdResult:
    """Minibatch SGD with momentum on ``mean loss + (lambda/2)||theta||^2``."""
    theta = np.array(theta0, dtype=np.float64)
    velocity = np.zeros_like(theta)
    losses = []
    n = cfg.dataset_size or problem.n
    step = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(n, cfg.batch_size, rng):
            loss, grad = problem.loss_and_grad(theta, idx, rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}", step=step)
            grad = grad + cfg.weight_decay * theta
            try:
                theta, velocity = sgd_momentum_step(theta, velocity, grad, cfg.lr, cfg.momentum)
            except TrainingError as exc:
                raise TrainingError(f"{exc} in epoch {epoch}", step=step) from None
            total += loss
            count += 1
            step += 1
        losses.append(total / max(count, 1))
        log.debug("sgd epoch %d loss %.6f", epoch, losses[-1])
    return SgdResult(theta, losses)


@dataclass
class ChainResult:
    samples: list[np.ndarray]
    snapshots: list[Snapshot]
    epoch_losses: list[float]
    theta: np.ndarray


def run_csghmc(problem, theta0, schedule: CyclicalSchedule, cfg: TrainConfig,
               rng: np.random.Generator) -> ChainResult:
    """Cyclical SGHMC; keeps the lowest-loss epoch of each sampling cycle."""
    n = cfg.dataset_size or problem.n
    if steps_per_epoch(n, cfg.batch_size) != schedule.steps_per_epoch:
        raise ConfigError(f"schedule assumes {schedule.steps_per_epoch} steps/epoch, data gives "
                          f"{steps_per_epoch(n, cfg.batch_size)}")
    state = SghmcState.start(theta0, cfg.momentum)
    samples, snaps, losses = [], [], []
    cycle_losses, cycle_thetas = [], []
    for epoch in range(schedule.total_epochs):
        if epoch % schedule.cycle_length == 0:
            cycle_losses, cycle_thetas = [], []
        noise = schedule.noise_on(epoch)
        total, count = 0.0, 0
        for idx in _batches(n, cfg.batch_size, rng):
            pos = state.next_position()
            loss, grad = problem.loss_and_grad(pos, idx, rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}", step=state.k)
            grad = grad + (cfg.weight_decay / n) * pos
            sghmc_step(state, grad, cyclic_lr(schedule, state.k), noise, rng, n)
            total += loss
            count += 1
        losses.append(total / max(count, 1))
        cycle_losses.append(losses[-1])
        sampling = (epoch // schedule.cycle_length) >= schedule.first_sampling_cycle
        cycle_thetas.append(state.theta.copy() if sampling else None)
        snap = collect_policy(schedule, epoch, cycle_losses)
        if snap is not None:
            samples.append(cycle_thetas[snap.offset])
            snaps.append(snap)
            log.debug("snapshot cycle %d epoch %d loss %.6f", snap.cycle, snap.epoch, cycle_losses[snap.offset])
    return ChainResult(samples, snaps, losses, state.theta)

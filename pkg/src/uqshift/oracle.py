"""Analytically tractable posteriors for checking the samplers.

``ConjugateLinReg`` has a closed-form Gaussian posterior, so SGHMC moments
can be compared against exact values. ``TwoModeModel`` observes ``w**2 * x``
and therefore has a posterior symmetric under ``w -> -w`` with modes at
``+w*`` and ``-w*``; whether snapshots land on both sides is a crisp test of
multimodal exploration.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .samplers import (CyclicalSchedule, SghmcState, TrainConfig, run_csghmc, run_sgd,
                       sghmc_step, steps_per_epoch)


@dataclass
class ConjugateLinReg:
    X: np.ndarray
    y: np.ndarray
    alpha: float = 1.0       # prior precision
    noise_precision: float = 1.0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValidationError(f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}")
        if self.alpha <= 0 or self.noise_precision <= 0:
            raise ValidationError("alpha and noise_precision must be > 0")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @classmethod
    def synthetic(cls, n: int = 50, w=(1.0, -2.0), alpha: float = 1.0,
                  noise_precision: float = 1.0, seed: int = 0) -> "ConjugateLinReg":
        rng = np.random.default_rng(seed)
        w = np.asarray(w, dtype=np.float64)
        X = rng.normal(size=(n, w.size))
        y = X @ w + rng.normal(scale=1 / math.sqrt(noise_precision), size=n)
        return cls(X, y, alpha, noise_precision)

    def hessian(self) -> np.ndarray:
        return self.alpha * np.eye(self.d) + self.noise_precision * self.X.T @ self.X

    # problem interface; the prior is supplied through weight_decay = alpha
    def init_params(self, seed: int) -> np.ndarray:
        return np.zeros(self.d)

    def loss_and_grad(self, theta, idx, rng=None):
        X, y = self.X[idx], self.y[idx]
        r = y - X @ theta
        return (0.5 * self.noise_precision * float(np.mean(r * r)),
                -self.noise_precision * (X.T @ r) / len(idx))


def analytic_posterior(reg: ConjugateLinReg) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the Gaussian posterior over the weights."""
    if reg.n == 0:
        return np.zeros(reg.d), np.eye(reg.d) / reg.alpha
    precision = reg.hessian()
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = reg.noise_precision * cov @ reg.X.T @ reg.y
    return mean, cov


@dataclass
class OracleSamplerConfig:
    lr: float | None = None  # None: 0.9 / largest Hessian eigenvalue
    lr_multiplier: float = 1.0
    beta: float = 0.9
    steps: int = 60000
    burn_in: int = 5000
    thin: int = 10
    batch_size: int | None = None  # None: full batch
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValidationError("beta must lie in [0, 1)")
        if self.thin < 1 or self.burn_in < 0 or self.steps <= self.burn_in:
            raise ValidationError("need thin >= 1 and steps > burn_in >= 0")


@dataclass
class MomentReport:
    analytic_mean: list[float]
    analytic_cov_diag: list[float]
    sample_mean: list[float] = field(default_factory=list)
    sample_cov_diag: list[float] = field(default_factory=list)
    mean_abs_err: list[float] = field(default_factory=list)
    mean_rel_err: list[float] = field(default_factory=list)
    cov_diag_rel_err: list[float] = field(default_factory=list)
    num_draws: int = 0
    lr: float = 0.0
    diverged: bool = False
    failure_step: int | None = None
    message: str = ""

    def passed(self, mean_tol: float = 0.05, cov_tol: float = 0.20) -> bool:
        return (not self.diverged and self.num_draws >= 2000
                and max(self.mean_rel_err) < mean_tol and max(self.cov_diag_rel_err) < cov_tol)

    def to_json(self) -> dict:
        return asdict(self)


def sghmc_vs_analytic(reg: ConjugateLinReg, cfg: OracleSamplerConfig | None = None) -> MomentReport:
    """Run constant-step SGHMC and compare draw moments with the exact posterior."""
    cfg = cfg or OracleSamplerConfig()
    mean, cov = analytic_posterior(reg)
    lr = cfg.lr if cfg.lr is not None else 0.9 / float(np.linalg.eigvalsh(reg.hessian())[-1])
    lr *= cfg.lr_multiplier
    report = MomentReport(mean.tolist(), np.diag(cov).tolist(), lr=lr)
    rng = np.random.default_rng(cfg.seed)
    batch = cfg.batch_size or reg.n
    state = SghmcState.start(np.zeros(reg.d), cfg.beta)
    draws = []
    all_idx = np.arange(reg.n)
    try:
        for k in range(cfg.steps):
            idx = all_idx if batch >= reg.n else rng.choice(reg.n, size=batch, replace=False)
            pos = state.next_position()
            _, g = reg.loss_and_grad(pos, idx)
            g = g + (reg.alpha / reg.n) * pos
            sghmc_step(state, g, lr, True, rng, reg.n)
            if np.abs(state.theta).max() > 1e12:
                raise NumericalError("chain diverged", step=state.k)
            if k >= cfg.burn_in and (k - cfg.burn_in) % cfg.thin == 0:
                draws.append(state.theta.copy())
    except NumericalError as exc:
        report.diverged = True
        report.failure_step = exc.step
        report.message = str(exc)
        return report
    draws = np.asarray(draws)
    s_mean = draws.mean(axis=0)
    s_var = draws.var(axis=0, ddof=1)
    report.num_draws = len(draws)
    report.sample_mean = s_mean.tolist()
    report.sample_cov_diag = s_var.tolist()
    report.mean_abs_err = np.abs(s_mean - mean).tolist()
    report.mean_rel_err = (np.abs(s_mean - mean) / np.abs(mean)).tolist()
    report.cov_diag_rel_err = (np.abs(s_var - np.diag(cov)) / np.diag(cov)).tolist()
    return report


# -- two-mode model -------------------------------------------------------

@dataclass
class TwoModeModel:
    x: np.ndarray
    y: np.ndarray
    noise_sd: float = 1.3
    prior_precision: float = 0.1
    w_star: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.x.shape != self.y.shape:
            raise ValidationError("x and y must have equal length")

    @classmethod
    def synthetic(cls, n: int = 8, w_star: float = 1.0, noise_sd: float = 1.3,
                  prior_precision: float = 0.1, seed: int = 0) -> "TwoModeModel":
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.5, 1.5, size=n)
        y = w_star**2 * x + rng.normal(scale=noise_sd, size=n)
        # rescale so the likelihood modes sit exactly at +-w_star
        y = y - x * (x @ y / (x @ x) - w_star**2)
        return cls(x, y, noise_sd, prior_precision, w_star)

    @property
    def n(self) -> int:
        return self.x.size

    def log_likelihood(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        r = self.y[None, :] - np.square(w).reshape(-1, 1) * self.x[None, :]
        ll = -0.5 * np.sum(r * r, axis=1) / self.noise_sd**2
        return ll.reshape(np.shape(w))

    def init_params(self, seed: int) -> np.ndarray:
        return np.array([self.w_star])

    def loss_and_grad(self, theta, idx, rng=None):
        w = float(theta[0])
        x, y = self.x[idx], self.y[idx]
        r = y - w * w * x
        s2 = self.noise_sd**2
        loss = 0.5 * float(np.mean(r * r)) / s2
        grad = -2.0 * w * float(np.mean(x * r)) / s2
        return loss, np.array([grad])


def mode_visit_count(model: TwoModeModel, samples) -> int:
    """Number of sign classes among samples with ``|w| > 0.5 * w*``."""
    w = np.asarray([np.asarray(s).reshape(-1)[0] for s in samples], dtype=np.float64)
    w = w[np.abs(w) > 0.5 * model.w_star]
    return int(np.unique(np.sign(w)).size)


@dataclass
class TwoModeConfig:
    lr0: float = 0.04
    cycles: int = 12
    burn_in_cycles: int = 2
    cycle_length: int = 25
    batch_size: int = 4
    beta: float = 0.9
    noise_start_epoch: int = 0
    sgd_lr: float = 0.05
    sgd_momentum: float = 0.9


def two_mode_csghmc(model: TwoModeModel, cfg: TwoModeConfig, seed: int):
    spe = steps_per_epoch(model.n, cfg.batch_size)
    schedule = CyclicalSchedule(
        lr0=cfg.lr0, cycle_length=cfg.cycle_length, steps_per_epoch=spe,
        total_epochs=cfg.cycles * cfg.cycle_length, burn_in_epochs=cfg.burn_in_cycles * cfg.cycle_length,
        noise_start_epoch=cfg.noise_start_epoch, num_samples=cfg.cycles - cfg.burn_in_cycles)
    train = TrainConfig(batch_size=cfg.batch_size, momentum=cfg.beta,
                        weight_decay=model.prior_precision, seed=seed)
    return run_csghmc(model, model.init_params(seed), schedule, train, np.random.default_rng(seed))


def two_mode_sgd(model: TwoModeModel, cfg: TwoModeConfig, seed: int):
    """Single-run SGD (the MAP baseline) from the same start."""
    train = TrainConfig(batch_size=cfg.batch_size, epochs=cfg.cycle_length, lr=cfg.sgd_lr,
                        momentum=cfg.sgd_momentum, weight_decay=model.prior_precision / model.n, seed=seed)
    return run_sgd(model, model.init_params(seed), train, np.random.default_rng(seed))

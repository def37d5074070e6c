"""DP-SGD training with histogram-driven dynamic clipping.

Per iteration: Poisson-sample a batch, compute per-example gradients,
clip them with the threshold currently in force, add Gaussian noise to the
sum and take an optimizer step, then release a noisy histogram of the
unclipped norms and let the clipping strategy pick the threshold for the
next iteration.

Random draws come from one ``numpy.random.Generator`` in a fixed order per
iteration: batch mask, gradient noise, histogram noise.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import strategy as strat
from .accountant import PrivacyBudget, auto_sigma_H, calibrate_sigma, compose, rdp_curve, rdp_to_dp
from .data import Dataset
from .histogram import build_histogram
from .models import Model

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("t", "C_t", "R_t", "batch_size", "train_loss", "variance_term", "bias_term", "eps_spent")


class TrainingDiverged(FloatingPointError):
    pass


def poisson_sample(N: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of a Poisson batch: each of the N examples enters independently with probability q."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"sampling rate must be in (0, 1], got {q}")
    return np.nonzero(rng.random(N) < q)[0]


def clip(g: np.ndarray, C: float) -> np.ndarray:
    """Scale ``g`` (or each row of a 2-D array) to L2 norm at most C."""
    g = np.asarray(g, dtype=float)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(1.0, norms / C)


class SGDMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.velocity is None:
            self.velocity = np.zeros_like(theta)
        self.velocity = self.momentum * self.velocity + grad
        return theta - self.lr * self.velocity


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float | None = None, momentum: float = 0.9,
                   beta1: float = 0.9, beta2: float = 0.999, eps_adam: float = 1e-8):
    if name == "adam":
        return Adam(1e-3 if lr is None else lr, beta1, beta2, eps_adam)
    if name in ("sgd", "sgd-momentum"):
        if lr is None:
            raise ValueError("sgd-momentum needs an explicit learning rate")
        return SGDMomentum(lr, momentum)
    raise ValueError(f"unknown optimizer {name!r}; expected 'adam' or 'sgd-momentum'")


def noisy_gradient(clipped: np.ndarray, C: float, sigma_T: float, B: float,
                   rng: np.random.Generator) -> np.ndarray:
    """(sum of clipped rows + N(0, (sigma_T C)^2 I)) / B."""
    total = clipped.sum(axis=0)
    return (total + rng.normal(0.0, sigma_T * C, size=total.shape)) / B


def dp_step(theta, clipped: np.ndarray, C: float, sigma_T: float, B: float, optimizer,
            rng: np.random.Generator) -> np.ndarray:
    """One private update from already-clipped per-example gradients (rows of ``clipped``).

    An empty batch (shape (0, d)) still draws noise and moves the parameters.
    """
    return optimizer.step(theta, noisy_gradient(clipped, C, sigma_T, B, rng))


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 10
    optimizer: str = "adam"
    lr: float | None = None
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    strategy: str = "expected-error"
    C0: float = 1.0
    R0: float | None = None
    bins: int = 20
    p: float | None = None
    epsilon: float = 8.0
    delta: float | None = None
    sigma: float | None = None
    sigma_H: float | None = None
    seed: int = 0

    def steps(self, N: int) -> int:
        return self.epochs * math.ceil(N / self.batch_size)


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    final_accuracy: float = float("nan")
    unclipped_fraction: list[float] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in METRIC_COLUMNS})


def resolve_budget(cfg: TrainConfig, N: int) -> PrivacyBudget:
    """Calibrate sigma for the target epsilon and split off the histogram share.

    delta defaults to 1/N. Static clipping releases no histogram, so its
    whole sigma goes to the gradient.
    """
    if not 1 <= cfg.batch_size <= N:
        raise ValueError(f"expected batch size must lie in [1, N={N}], got {cfg.batch_size}")
    q = cfg.batch_size / N
    T = cfg.steps(N)
    delta = 1.0 / N if cfg.delta is None else cfg.delta
    sigma = cfg.sigma if cfg.sigma is not None else calibrate_sigma(cfg.epsilon, delta, q, T)
    if cfg.strategy == "static":
        sigma_H = None
    else:
        sigma_H = cfg.sigma_H if cfg.sigma_H is not None else auto_sigma_H(sigma)
    budget = PrivacyBudget(epsilon=cfg.epsilon, delta=delta, q=q, T=T, sigma=sigma, sigma_H=sigma_H)
    budget.epsilon = budget.spent()
    return budget


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          budget: PrivacyBudget | None = None) -> tuple[np.ndarray, RunMetrics, PrivacyBudget]:
    """Run DC-SGD (or plain DP-SGD for ``strategy='static'``) on the training split."""
    X, y = dataset.train
    N = len(y)
    if budget is None:
        budget = resolve_budget(cfg, N)
    B = float(cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    theta = model.init_params(rng)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.beta1, cfg.beta2, cfg.eps_adam)
    state = strat.initial_state(cfg.strategy, cfg.C0, cfg.R0, cfg.p, cfg.bins)
    per_step = rdp_curve(budget.q, budget.sigma)
    metrics = RunMetrics()
    logger.info("training %s: T=%d q=%.5g sigma=%.4g sigma_T=%.4g sigma_H=%s",
                cfg.strategy, budget.T, budget.q, budget.sigma, budget.sigma_T, budget.sigma_H)

    for t in range(budget.T):
        idx = poisson_sample(N, budget.q, rng)
        losses, grads = model.per_example_grads(theta, X[idx], y[idx])
        norms = np.linalg.norm(grads, axis=1)
        C = state.C
        theta = dp_step(theta, clip(grads, C), C, budget.sigma_T, B, opt, rng)
        if not np.all(np.isfinite(theta)):
            raise TrainingDiverged(f"non-finite parameters at iteration {t} (C_t={C}, batch={len(idx)})")

        row = {"t": t, "C_t": C, "R_t": state.R, "batch_size": len(idx),
               "train_loss": float(losses.mean()) if len(idx) else float("nan"),
               "variance_term": None, "bias_term": None,
               "eps_spent": rdp_to_dp(compose(per_step, t + 1), budget.delta)[0]}
        if len(idx) and not np.isfinite(row["train_loss"]):
            raise TrainingDiverged(f"non-finite training loss at iteration {t} (C_t={C})")
        metrics.unclipped_fraction.append(float(np.mean(norms <= C)) if len(idx) else float("nan"))

        if cfg.strategy != "static":
            hist = build_histogram(norms, state.R, cfg.bins, budget.sigma_H, rng)
            state = strat.update(state, hist, budget.sigma_T, B, model.dim)
            if state.estimate is not None:
                row["variance_term"] = state.estimate.variance
                row["bias_term"] = state.estimate.bias
        metrics.rows.append(row)

    Xt, yt = dataset.test
    metrics.final_accuracy = model.accuracy(theta, Xt, yt)
    return theta, metrics, budget


def write_summary(path, cfg: TrainConfig, budget: PrivacyBudget, metrics: RunMetrics, extra: dict | None = None) -> dict:
    summary = {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "final_accuracy": metrics.final_accuracy,
        "epsilon": budget.epsilon,
        "delta": budget.delta,
        "sigma": budget.sigma,
        "sigma_H": budget.sigma_H,
        "sigma_T": budget.sigma_T,
        "config_echo": {**asdict(cfg), **(extra or {})},
    }
    with open(Path(path), "w") as f:
        json.dump(summary, f, indent=2)
    return summary

"""Privacy accounting for the Poisson-subsampled Gaussian mechanism.

Everything here is a pure function. RDP values are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75) + tuple(float(a) for a in range(2, 513))

SIGMA_CEILING = 100.0
SIGMA_FLOOR = 0.05
SIGMA_TOL = 1e-3


class InfeasibleBudgetError(ValueError):
    """Raised when no noise configuration satisfies the requested privacy parameters."""


@dataclass(frozen=True)
class RdpCurve:
    """RDP guarantee per order.

    ``steps`` counts how many identical mechanisms were composed; ``values``
    is always ``unit_values * steps`` so repeated composition is exact.
    """

    orders: tuple[float, ...]
    unit_values: tuple[float, ...]
    steps: int = 1

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        unit = tuple(float(v) for v in self.unit_values)
        if len(orders) != len(unit):
            raise ValueError("orders and values must have the same length")
        if any(a <= 1.0 for a in orders):
            raise ValueError("all RDP orders must be > 1")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise ValueError("RDP orders must be strictly increasing")
        if any(not v >= 0.0 for v in unit):
            raise ValueError("RDP values must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "unit_values", unit)

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(v * self.steps for v in self.unit_values)

    def __len__(self) -> int:
        return len(self.orders)


@dataclass
class PrivacyBudget:
    """Noise and accounting parameters shared by the accountant and the trainer.

    ``sigma_H`` is None when no histogram is released (static clipping), in
    which case ``sigma_T == sigma``.
    """

    epsilon: float
    delta: float
    q: float
    T: int
    sigma: float
    sigma_H: float | None = None
    sigma_T: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must be in (0, 1], got {self.q}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.sigma_H is None:
            self.sigma_T = self.sigma
        else:
            self.sigma_T = split_noise(self.sigma, self.sigma_H)

    @classmethod
    def calibrated(cls, epsilon, delta, q, T, sigma_H=None, **kwargs) -> "PrivacyBudget":
        sigma = calibrate_sigma(epsilon, delta, q, T, **kwargs)
        return cls(epsilon=epsilon, delta=delta, q=q, T=T, sigma=sigma, sigma_H=sigma_H)

    def spent(self, steps: int | None = None) -> float:
        """Epsilon after ``steps`` iterations (default: all T)."""
        steps = self.T if steps is None else steps
        return epsilon_for(self.q, self.sigma, steps, self.delta)


def _check_sgm_args(q: float, sigma: float) -> None:
    if not 0.0 < q <= 1.0:
        raise ValueError(f"sampling rate q must be in (0, 1], got {q}")
    if not sigma > 0.0:
        raise ValueError(f"noise multiplier sigma must be > 0, got {sigma}")


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    # log E_{x~N(0,s^2)}[((1-q) + q*exp((2x-1)/(2 s^2)))^alpha], expanded binomially;
    # the i-th Gaussian moment is exp((i^2 - i) / (2 s^2)).
    if q == 1.0:
        return alpha * (alpha - 1) / (2.0 * sigma**2)
    i = np.arange(alpha + 1, dtype=float)
    log_binom = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
    terms = log_binom + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2.0 * sigma**2)
    return float(logsumexp(terms))


def rdp_sgm(q: float, sigma: float, alpha: float) -> float:
    """RDP of one step of the subsampled Gaussian mechanism at order ``alpha``.

    Integer orders are exact. A fractional order is bounded by the next
    integer order, which never under-reports the loss since Renyi divergence
    grows with the order.
    """
    _check_sgm_args(q, sigma)
    if not alpha > 1.0:
        raise ValueError(f"RDP order must be > 1, got {alpha}")
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    a = int(math.ceil(alpha))
    return max(_log_a_int(q, sigma, a) / (a - 1), 0.0)


def _rdp_int_orders(q: float, sigma: float, alphas: np.ndarray) -> np.ndarray:
    # all integer orders in one pass: row k holds the binomial terms of alphas[k]
    i = np.arange(alphas.max() + 1, dtype=float)[None, :]
    a = alphas.astype(float)[:, None]
    with np.errstate(invalid="ignore"):
        log_binom = gammaln(a + 1) - gammaln(i + 1) - gammaln(a - i + 1)
    terms = log_binom + i * math.log(q) + (a - i) * math.log1p(-q) + (i * i - i) / (2.0 * sigma**2)
    terms = np.where(i <= a, terms, -np.inf)
    log_a = logsumexp(terms, axis=1)
    return np.maximum(log_a / (alphas - 1), 0.0)


def rdp_curve(q: float, sigma: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Per-step RDP of the subsampled Gaussian over a grid of orders."""
    _check_sgm_args(q, sigma)
    orders = tuple(float(a) for a in orders)
    if any(a <= 1.0 for a in orders):
        raise ValueError("all RDP orders must be > 1")
    if q == 1.0:
        return RdpCurve(orders, tuple(a / (2.0 * sigma**2) for a in orders))
    ceil = np.ceil(np.asarray(orders)).astype(int)
    uniq = np.unique(ceil)
    table = dict(zip(uniq.tolist(), _rdp_int_orders(q, sigma, uniq).tolist()))
    return RdpCurve(orders, tuple(table[a] for a in ceil.tolist()))


def compose(curve: RdpCurve, T: int) -> RdpCurve:
    """RDP of ``T`` identical adaptive steps."""
    if T < 1:
        raise ValueError(f"step count must be >= 1, got {T}")
    return RdpCurve(curve.orders, curve.unit_values, curve.steps * int(T))


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Convert an RDP curve to (epsilon, best order) at the given delta.

    Uses the conversion eps = rho + log((a-1)/a) - (log delta + log a)/(a-1),
    minimised over the curve's orders and floored at zero.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if len(curve) == 0:
        raise ValueError("empty RDP curve")
    a = np.asarray(curve.orders)
    rho = np.asarray(curve.values)
    eps = rho + np.log((a - 1.0) / a) - (math.log(delta) + np.log(a)) / (a - 1.0)
    k = int(np.argmin(eps))
    return max(float(eps[k]), 0.0), float(a[k])


def epsilon_for(q: float, sigma: float, T: int, delta: float,
                orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    return rdp_to_dp(compose(rdp_curve(q, sigma, orders), T), delta)[0]


def calibrate_sigma(epsilon: float, delta: float, q: float, T: int,
                    tol: float = SIGMA_TOL, sigma_min: float = SIGMA_FLOOR,
                    sigma_max: float = SIGMA_CEILING,
                    orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    """Smallest noise multiplier (to within ``tol``) reaching ``epsilon``.

    The result ``s`` satisfies eps(s) <= epsilon < eps(s - tol), i.e. the
    bisection always rounds towards more noise. Returns ``sigma_min`` when
    even that much noise is enough.
    """
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    _check_sgm_args(q, sigma_min)

    def eps_at(s):
        return epsilon_for(q, s, T, delta, orders)

    if eps_at(sigma_max) > epsilon:
        raise InfeasibleBudgetError(
            f"epsilon={epsilon} unreachable with sigma <= {sigma_max} (q={q}, T={T}, delta={delta})")
    if eps_at(sigma_min) <= epsilon:
        return sigma_min
    lo, hi = sigma_min, sigma_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def split_noise(sigma: float, sigma_H: float) -> float:
    """Gradient noise multiplier left after giving ``sigma_H`` to the histogram.

    Releasing the gradient sum with ``sigma_T`` and the norm histogram with
    ``sigma_H`` costs exactly what one release with ``sigma`` does, because
    the concatenated (gradient, one-hot) contribution has L2 norm
    sqrt(sigma_T**-2 + sigma_H**-2) = 1/sigma after rescaling.
    """
    if not sigma > 0.0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not sigma_H > sigma:
        raise InfeasibleBudgetError(
            f"histogram noise sigma_H={sigma_H} must exceed total sigma={sigma}")
    return (sigma**-2 - sigma_H**-2) ** -0.5


def merge_noise(sigma_T: float, sigma_H: float) -> float:
    return (sigma_T**-2 + sigma_H**-2) ** -0.5


def auto_sigma_H(sigma: float) -> float:
    if sigma < 2.0:
        return 5.0
    if sigma <= 3.0:
        return 8.0
    return 12.0


@dataclass(frozen=True)
class TuningCost:
    epsilon: float
    delta: float
    T: float


def lt_tuning_cost(eps1: float, delta1: float, gamma: float, delta2: float) -> TuningCost:
    """Privacy cost of random-stopping hyperparameter tuning.

    Each run is (eps1, delta1)-DP; the tuner stops with probability ``gamma``
    per draw and has hard limit T = ln(1/delta2)/gamma.
    """
    if not eps1 > 0.0:
        raise ValueError(f"eps1 must be > 0, got {eps1}")
    if not delta1 >= 0.0:
        raise ValueError(f"delta1 must be >= 0, got {delta1}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    if not delta2 > 0.0:
        raise ValueError(f"delta2 must be > 0, got {delta2}")
    T = math.log(1.0 / delta2) / gamma
    slack = 3.0 * math.sqrt(2.0 * delta1)
    return TuningCost(epsilon=3.0 * eps1 + slack, delta=slack * T + delta2, T=T)

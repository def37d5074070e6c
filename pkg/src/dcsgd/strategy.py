"""Clipping-threshold selection from a noisy gradient-norm histogram.

Both dynamic rules only read the already-privatised histogram, so they are
post-processing and cost no privacy budget. The threshold they return is
meant for the *next* iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .histogram import NormHistogram, total_count

STRATEGIES = ("static", "percentile", "expected-error")

N_CANDIDATES = 20
MAX_RECENTER = 10


@dataclass(frozen=True)
class ErrorEstimate:
    candidate_C: float
    variance: float
    bias: float
    total: float


@dataclass(frozen=True)
class ClipState:
    C: float
    R: float
    strategy: str = "static"
    p: float | None = None
    estimate: ErrorEstimate | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGIES)}")
        if not self.C > 0:
            raise ValueError(f"clipping threshold must be > 0, got {self.C}")
        if not self.R > 0:
            raise ValueError(f"histogram range must be > 0, got {self.R}")
        if self.strategy == "percentile":
            _check_p(self.p)


def initial_state(strategy: str, C0: float = 1.0, R0: float | None = None,
                  p: float | None = None, bins: int = 20) -> ClipState:
    """Default starting state: R0 = 1 for percentile, R0 = b for expected-error."""
    if R0 is None:
        R0 = float(bins) if strategy == "expected-error" else 1.0
    return ClipState(C=C0, R=R0, strategy=strategy, p=p)


def _check_p(p) -> None:
    if p is None or not 0.0 < p < 1.0:
        raise ValueError(f"percentile p must be a fraction in (0, 1), got {p}")


def percentile_threshold(hist: NormHistogram, p: float, state: ClipState) -> ClipState:
    """Move C to the midpoint of the bin where the running count reaches p * S'.

    The next range is [0, 2C]. If the crossing happens in the first or last
    bin the midpoint is still taken; the range then shrinks or grows
    geometrically over the following iterations.
    """
    _check_p(p)
    running = np.cumsum(hist.counts)
    s_total = total_count(hist)
    if s_total <= 0:
        return state
    hits = np.nonzero(running >= p * s_total)[0]
    k = int(hits[0]) if hits.size else hist.bins - 1
    C = float(hist.midpoints[k])
    return replace(state, C=C, R=2.0 * C, estimate=None)


def _bias_terms(hist: NormHistogram, C: np.ndarray) -> np.ndarray:
    s_total = max(total_count(hist), 1.0)
    excess = np.maximum(hist.midpoints[None, :] - np.asarray(C, dtype=float)[:, None], 0.0)
    bias = (excess**2 @ hist.counts) / s_total
    # negative noisy counts can push the estimate below zero
    return np.maximum(bias, 0.0)


def expected_squared_error(hist: NormHistogram, C: float, sigma_T: float, B: float, d: int) -> ErrorEstimate:
    """Noise variance plus clipping bias of one privatised gradient at threshold C.

    Every norm in a bin is represented by the bin midpoint.
    """
    if not C > 0:
        raise ValueError(f"candidate threshold must be > 0, got {C}")
    if not B >= 1:
        raise ValueError(f"expected batch size must be >= 1, got {B}")
    if not d >= 1:
        raise ValueError(f"model dimension must be >= 1, got {d}")
    variance = sigma_T**2 * C**2 * d / B**2
    bias = float(_bias_terms(hist, np.array([C]))[0])
    return ErrorEstimate(candidate_C=float(C), variance=variance, bias=bias, total=variance + bias)


def error_curve(hist: NormHistogram, candidates, sigma_T: float, B: float, d: int) -> list[ErrorEstimate]:
    candidates = np.asarray(candidates, dtype=float)
    variance = sigma_T**2 * candidates**2 * d / B**2
    bias = _bias_terms(hist, candidates)
    return [ErrorEstimate(float(c), float(v), float(b), float(v + b))
            for c, v, b in zip(candidates, variance, bias)]


def error_minimizing_threshold(hist: NormHistogram, state: ClipState, sigma_T: float, B: float, d: int,
                               max_recenter: int = MAX_RECENTER) -> ClipState:
    """Pick C from the grid 0.1C..2C that minimises the estimated error.

    A minimiser on either end of the grid becomes the new centre and the
    search repeats, at most ``max_recenter`` times. Ties go to the smaller
    threshold. Afterwards the range doubles when the overflow bin holds at
    least half the (noisy) count and halves when the upper half of the bins
    holds at most S'/b.
    """
    s_total = total_count(hist)
    if s_total <= 0:
        return state
    steps = np.arange(1, N_CANDIDATES + 1) / 10.0
    C = state.C
    for _ in range(max_recenter + 1):
        curve = error_curve(hist, steps * C, sigma_T, B, d)
        k = int(np.argmin([e.total for e in curve]))
        best = curve[k]
        C = best.candidate_C
        if k not in (0, N_CANDIDATES - 1):
            break

    R = state.R
    if hist.counts[-1] >= 0.5 * s_total:
        R = 2.0 * R
    elif np.sum(hist.counts[hist.bins // 2:]) <= s_total / hist.bins:
        R = 0.5 * R
    return replace(state, C=C, R=R, estimate=best)


def update(state: ClipState, hist: NormHistogram | None, sigma_T: float, B: float, d: int) -> ClipState:
    """Dispatch to the configured strategy; static clipping never changes."""
    if state.strategy == "static":
        return state
    if state.strategy == "percentile":
        return percentile_threshold(hist, state.p, state)
    return error_minimizing_threshold(hist, state, sigma_T, B, d)

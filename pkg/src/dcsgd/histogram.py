"""Noisy histograms of per-example gradient norms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class NormHistogram:
    """Bin counts over [0, R] with ``bins`` equal-width bins.

    Bin i covers [i*R/b, (i+1)*R/b); the last bin also holds every norm >= R.
    Counts are noisy (and may be negative) when ``sigma_H > 0``.
    """

    counts: np.ndarray
    range: float
    bins: int
    sigma_H: float = 0.0

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.shape != (self.bins,):
            raise ValueError(f"expected {self.bins} counts, got shape {counts.shape}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def width(self) -> float:
        return self.range / self.bins

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.bins + 1) * self.range / self.bins

    @property
    def midpoints(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    def to_rows(self) -> list[tuple[float, float, float]]:
        e = self.edges
        return [(float(e[i]), float(e[i + 1]), float(c)) for i, c in enumerate(self.counts)]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for row in self.to_rows():
                w.writerow([repr(x) for x in row])


def bin_index(norms, R: float, b: int) -> np.ndarray:
    """Bin of each norm; values on an edge go to the upper bin, values >= R to the last."""
    norms = np.asarray(norms, dtype=float)
    edges = np.arange(b + 1) * R / b
    idx = np.searchsorted(edges, norms, side="right") - 1
    return np.minimum(idx, b - 1)


def build_histogram(norms, R: float, b: int, sigma_H: float = 0.0,
                    rng: np.random.Generator | None = None) -> NormHistogram:
    """Histogram ``norms`` over [0, R] and add N(0, sigma_H^2) to every bin.

    Each example contributes a one-hot vector, so the pre-noise histogram
    has L2 sensitivity 1. No random numbers are drawn when ``sigma_H == 0``.
    """
    if not R > 0:
        raise ValueError(f"histogram range must be > 0, got {R}")
    if int(b) != b or b < 2:
        raise ValueError(f"bin count must be an integer >= 2, got {b}")
    if not sigma_H >= 0:
        raise ValueError(f"sigma_H must be >= 0, got {sigma_H}")
    b = int(b)
    norms = np.asarray(norms, dtype=float).ravel()
    if norms.size and (not np.all(np.isfinite(norms)) or norms.min() < 0):
        raise ValueError("gradient norms must be finite and non-negative")

    counts = np.bincount(bin_index(norms, R, b), minlength=b).astype(float)
    if sigma_H > 0:
        if rng is None:
            raise ValueError("an rng is required when sigma_H > 0")
        counts = counts + rng.normal(0.0, sigma_H, size=b)
    return NormHistogram(counts=counts, range=float(R), bins=b, sigma_H=float(sigma_H))


def total_count(hist: NormHistogram) -> float:
    """Noisy estimate of how many norms went into ``hist``."""
    return float(np.sum(hist.counts))

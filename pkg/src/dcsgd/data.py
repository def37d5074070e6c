"""Synthetic norm populations, classification blobs, and a labeled-CSV loader."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN_FRACTION = 0.8


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class NormPopulation:
    values: np.ndarray
    dist: str
    params: tuple[float, ...]
    seed: int | None


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError(f"features {self.X.shape} do not match labels {self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        both = np.concatenate([self.train_idx, self.test_idx])
        if not np.array_equal(np.sort(both), np.arange(len(self.y))):
            raise DataError("train/test split must be disjoint and cover every example")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[self.train_idx], self.y[self.train_idx]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[self.test_idx], self.y[self.test_idx]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.n_classes == other.n_classes
                and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.train_idx, other.train_idx)
                and np.array_equal(self.test_idx, other.test_idx))


def random_split(n: int, rng: np.random.Generator, train_fraction: float = TRAIN_FRACTION):
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def gen_norms(dist: str, n: int, params=(), seed: int | None = None) -> NormPopulation:
    """Draw ``n`` non-negative synthetic gradient norms.

    dist is one of ``gaussian`` (mu, s), ``lognormal`` (mu, s) or
    ``constant`` (c). Negative Gaussian draws are redrawn, not truncated.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 norms, got {n}")
    params = tuple(float(v) for v in params)
    rng = np.random.default_rng(seed)
    if dist == "constant":
        if len(params) != 1 or params[0] < 0:
            raise ValueError("constant needs one non-negative value")
        values = np.full(n, params[0])
    elif dist in ("gaussian", "lognormal"):
        if len(params) != 2 or params[1] < 0:
            raise ValueError(f"{dist} needs (mu, s) with s >= 0")
        mu, s = params
        if dist == "lognormal":
            values = rng.lognormal(mu, s, size=n)
        else:
            if s == 0 and mu < 0:
                raise ValueError("gaussian with s = 0 needs mu >= 0")
            values = rng.normal(mu, s, size=n)
            bad = values < 0
            while bad.any():
                values[bad] = rng.normal(mu, s, size=int(bad.sum()))
                bad = values < 0
    else:
        raise ValueError(f"unknown norm distribution {dist!r}")
    return NormPopulation(values=values, dist=dist, params=params, seed=seed)


def gen_blobs(n: int, d: int, classes: int = 2, separation: float = 10.0, seed: int | None = None) -> Dataset:
    """``classes`` unit-variance Gaussian clusters whose centres are pairwise ``separation`` apart.

    Centres sit at separation/sqrt(2) along distinct axes, so d >= classes
    is required. Examples are split 80/20 at random.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    if d < classes:
        raise ValueError(f"need d >= classes to place centres on distinct axes, got d={d}")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    rng.shuffle(y)
    centres = np.zeros((classes, d))
    centres[np.arange(classes), np.arange(classes)] = separation / math.sqrt(2.0)
    X = centres[y] + rng.standard_normal((n, d))
    train_idx, test_idx = random_split(n, rng)
    return Dataset(X=X, y=y, n_classes=classes, train_idx=train_idx, test_idx=test_idx)


def standardize(ds: Dataset) -> Dataset:
    """Zero-mean, unit-variance columns (constant columns are only centred)."""
    mu = ds.X.mean(axis=0)
    sd = ds.X.std(axis=0)
    sd[sd == 0] = 1.0
    return Dataset(X=(ds.X - mu) / sd, y=ds.y, n_classes=ds.n_classes,
                   train_idx=ds.train_idx, test_idx=ds.test_idx, feature_names=list(ds.feature_names))


def save_csv(ds: Dataset, path, label_col: str = "label", split_col: str | None = "split") -> None:
    """Write features, label and (optionally) the split membership; floats use repr for exact round trips."""
    split = np.full(len(ds.y), "train", dtype=object)
    split[ds.test_idx] = "test"
    with open(Path(path), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        header = list(ds.feature_names) + [label_col]
        if split_col:
            header.append(split_col)
        w.writerow(header)
        for i in range(len(ds.y)):
            row = [repr(float(v)) for v in ds.X[i]] + [str(int(ds.y[i]))]
            if split_col:
                row.append(split[i])
            w.writerow(row)


def load_csv(path, label_col: str = "label", standardize_features: bool = True,
             split_col: str = "split", seed: int | None = 0) -> Dataset:
    """Load a header-first numeric CSV.

    Labels must be non-negative integers and become class indices directly.
    A ``split`` column with ``train``/``test`` values is honoured when
    present; otherwise the rows are split 80/20 using ``seed``.
    """
    path = Path(path)
    try:
        f = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    with f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if label_col not in header:
            raise DataError(f"{path}: label column {label_col!r} not found in header {header}")
        label_at = header.index(label_col)
        split_at = header.index(split_col) if split_col in header else None
        feat_at = [i for i in range(len(header)) if i not in (label_at, split_at)]

        X, y, split = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            feats = []
            for i in feat_at:
                try:
                    feats.append(float(row[i]))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {header[i]!r}: not a number: {row[i]!r}") from None
            raw = row[label_at].strip()
            try:
                lab = float(raw)
            except ValueError:
                lab = math.nan
            if not (lab >= 0 and lab == int(lab)):
                raise DataError(f"{path}:{lineno}: column {label_col!r}: label must be a non-negative integer, got {raw!r}")
            if split_at is not None:
                s = row[split_at].strip()
                if s not in ("train", "test"):
                    raise DataError(f"{path}:{lineno}: column {split_col!r}: expected 'train' or 'test', got {s!r}")
                split.append(s)
            X.append(feats)
            y.append(int(lab))

    if not y:
        raise DataError(f"{path}: no data rows")
    X = np.asarray(X, dtype=float).reshape(len(y), len(feat_at))
    y = np.asarray(y, dtype=int)
    if split_at is not None:
        split = np.asarray(split)
        train_idx, test_idx = np.nonzero(split == "train")[0], np.nonzero(split == "test")[0]
    else:
        train_idx, test_idx = random_split(len(y), np.random.default_rng(seed))
    ds = Dataset(X=X, y=y, n_classes=int(y.max()) + 1, train_idx=train_idx, test_idx=test_idx,
                 feature_names=[header[i] for i in feat_at])
    return standardize(ds) if standardize_features else ds

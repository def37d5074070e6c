"""Small classifiers with closed-form per-example gradients.

Parameters live in one flat float64 vector so clipping and noising act on a
single array; each model knows how to view that vector as weight matrices.
Loss is softmax cross-entropy throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_batch(X, y, n_features, n_classes):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y)).astype(int)
    if X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    if np.any((y < 0) | (y >= n_classes)):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return X, y


class Model:
    n_features: int
    n_classes: int

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def logits(self, theta, X) -> np.ndarray:
        raise NotImplementedError

    def per_example_grads(self, theta, X, y) -> tuple[np.ndarray, np.ndarray]:
        """Per-example losses (n,) and gradients (n, dim)."""
        raise NotImplementedError

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of length {self.dim}, got shape {theta.shape}")
        return theta

    def losses(self, theta, X, y) -> np.ndarray:
        X, y = _check_batch(X, y, self.n_features, self.n_classes)
        lp = log_softmax(self.logits(theta, X))
        return -lp[np.arange(len(y)), y]

    def loss(self, theta, x, y) -> float:
        """Cross-entropy of a single example."""
        return float(self.losses(theta, x, [y])[0])

    def per_example_gradient(self, theta, x, y) -> np.ndarray:
        return self.per_example_grads(theta, x, [y])[1][0]

    def predict(self, theta, X) -> np.ndarray:
        return np.argmax(self.logits(theta, X), axis=1)

    def accuracy(self, theta, X, y) -> float:
        y = np.asarray(y)
        if len(y) == 0:
            return float("nan")
        return float(np.mean(self.predict(theta, X) == y))


@dataclass
class LogisticRegression(Model):
    """Multinomial logistic regression; theta = [W (K x D) row-major, b (K)]."""

    n_features: int
    n_classes: int

    @property
    def dim(self) -> int:
        return self.n_classes * (self.n_features + 1)

    def unpack(self, theta):
        theta = self._check_theta(theta)
        K, D = self.n_classes, self.n_features
        return theta[: K * D].reshape(K, D), theta[K * D:]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        a = 1.0 / math.sqrt(self.n_features)
        return rng.uniform(-a, a, size=self.dim)

    def logits(self, theta, X):
        W, b = self.unpack(theta)
        return np.asarray(X, dtype=float) @ W.T + b

    def per_example_grads(self, theta, X, y):
        X, y = _check_batch(X, y, self.n_features, self.n_classes)
        lp = log_softmax(self.logits(theta, X))
        n = len(y)
        resid = np.exp(lp)
        resid[np.arange(n), y] -= 1.0
        gW = resid[:, :, None] * X[:, None, :]
        grads = np.concatenate([gW.reshape(n, -1), resid], axis=1)
        return -lp[np.arange(n), y], grads


@dataclass
class MLP(Model):
    """One tanh hidden layer; theta = [W1 (H x D), b1 (H), W2 (K x H), b2 (K)]."""

    n_features: int
    n_hidden: int
    n_classes: int

    @property
    def dim(self) -> int:
        D, H, K = self.n_features, self.n_hidden, self.n_classes
        return H * D + H + K * H + K

    def unpack(self, theta):
        theta = self._check_theta(theta)
        D, H, K = self.n_features, self.n_hidden, self.n_classes
        i = 0
        W1 = theta[i:i + H * D].reshape(H, D); i += H * D
        b1 = theta[i:i + H]; i += H
        W2 = theta[i:i + K * H].reshape(K, H); i += K * H
        b2 = theta[i:i + K]
        return W1, b1, W2, b2

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        a1 = 1.0 / math.sqrt(self.n_features)
        a2 = 1.0 / math.sqrt(self.n_hidden)
        D, H, K = self.n_features, self.n_hidden, self.n_classes
        return np.concatenate([
            rng.uniform(-a1, a1, size=H * D + H),
            rng.uniform(-a2, a2, size=K * H + K),
        ])

    def _forward(self, theta, X):
        W1, b1, W2, b2 = self.unpack(theta)
        h = np.tanh(np.asarray(X, dtype=float) @ W1.T + b1)
        return h, h @ W2.T + b2

    def logits(self, theta, X):
        return self._forward(theta, X)[1]

    def per_example_grads(self, theta, X, y):
        X, y = _check_batch(X, y, self.n_features, self.n_classes)
        W2 = self.unpack(theta)[2]
        h, z = self._forward(theta, X)
        lp = log_softmax(z)
        n = len(y)
        dz = np.exp(lp)
        dz[np.arange(n), y] -= 1.0
        da = (dz @ W2) * (1.0 - h**2)
        grads = np.concatenate([
            (da[:, :, None] * X[:, None, :]).reshape(n, -1),
            da,
            (dz[:, :, None] * h[:, None, :]).reshape(n, -1),
            dz,
        ], axis=1)
        return -lp[np.arange(n), y], grads


def build_model(kind: str, n_features: int, n_classes: int, n_hidden: int = 32) -> Model:
    if kind in ("logreg", "logistic"):
        return LogisticRegression(n_features, n_classes)
    if kind == "mlp":
        return MLP(n_features, n_hidden, n_classes)
    raise ValueError(f"unknown model {kind!r}; expected 'logreg' or 'mlp'")

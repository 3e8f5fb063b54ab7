"""Softmax classifiers with hand-written backprop.

Weights are a single flat ``float64`` vector so that samplers and the
aggregation code never see layer structure. Layouts (row-major):

* ``logreg``: ``W (f, C) | b (C)``
* ``mlp``:    ``W1 (f, h) | b1 (h) | W2 (h, C) | b2 (C)`` with tanh hidden units
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DivergenceError(RuntimeError):
    """Non-finite activations or a runaway loss."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "logreg" | "mlp"
    n_features: int
    n_classes: int
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def dim(self) -> int:
        f, c, h = self.n_features, self.n_classes, self.hidden
        if self.kind == "logreg":
            return f * c + c
        return f * h + h + h * c + c

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform in +-1/sqrt(fan_in) per layer."""
        f, c, h = self.n_features, self.n_classes, self.hidden
        if self.kind == "logreg":
            a = 1.0 / math.sqrt(f)
            return rng.uniform(-a, a, self.dim)
        a1, a2 = 1.0 / math.sqrt(f), 1.0 / math.sqrt(h)
        return np.concatenate([
            rng.uniform(-a1, a1, f * h + h),
            rng.uniform(-a2, a2, h * c + c),
        ])

    def unpack(self, w):
        f, c, h = self.n_features, self.n_classes, self.hidden
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} weights, got shape {w.shape}")
        if self.kind == "logreg":
            return w[:f * c].reshape(f, c), w[f * c:]
        i = 0
        w1 = w[i:i + f * h].reshape(f, h); i += f * h
        b1 = w[i:i + h]; i += h
        w2 = w[i:i + h * c].reshape(h, c); i += h * c
        return w1, b1, w2, w[i:]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, w, x):
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "logreg":
        W, b = spec.unpack(w)
        return x @ W + b
    w1, b1, w2, b2 = spec.unpack(w)
    return np.tanh(x @ w1 + b1) @ w2 + b2


def loss_and_grad(spec: ModelSpec, w, x, y):
    """Mean softmax cross-entropy over the batch and its gradient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if spec.kind == "logreg":
        W, b = spec.unpack(w)
        z = x @ W + b
        hid = None
    else:
        w1, b1, w2, b2 = spec.unpack(w)
        hid = np.tanh(x @ w1 + b1)
        z = hid @ w2 + b2
    logp = _log_softmax(z)
    if not np.all(np.isfinite(logp)):
        raise DivergenceError("non-finite activations")
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz /= n
    if spec.kind == "logreg":
        return float(loss), np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0)])
    dhid = (dz @ w2.T) * (1.0 - hid * hid)
    grad = np.concatenate([
        (x.T @ dhid).ravel(), dhid.sum(axis=0),
        (hid.T @ dz).ravel(), dz.sum(axis=0),
    ])
    return float(loss), grad


def predict(spec: ModelSpec, w, x):
    # argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(logits(spec, w, x), axis=1)

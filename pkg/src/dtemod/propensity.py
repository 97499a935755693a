"""Propensity score model and inverse probability weights.

The propensity ``e(x) = P(A=1 | X=x)`` is fitted with a small ReLU network
(``d -> 50 -> 50 -> 1`` by default) trained on binary cross-entropy with
plain mini-batch gradient descent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._seeding import rng_for
from .dataset import Dataset


class PropensityError(ValueError):
    pass


@dataclass(frozen=True)
class PropensityConfig:
    hidden: tuple[int, ...] = (50, 50)
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-2
    seed: int = 0
    clip: float = 0.01


@dataclass(frozen=True, eq=False)
class IPWeights:
    """``w0_i = 1(a_i=0) / (1 - e_i)`` and ``w1_i = 1(a_i=1) / e_i``."""

    w0: np.ndarray
    w1: np.ndarray

    def __post_init__(self):
        if self.w0.shape != self.w1.shape or self.w0.ndim != 1:
            raise ValueError("w0 and w1 must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(self.w0)) and np.all(np.isfinite(self.w1))):
            raise ValueError("inverse probability weights must be finite")
        if np.any(self.w0 < 0) or np.any(self.w1 < 0):
            raise ValueError("inverse probability weights must be nonnegative")

    @property
    def difference(self) -> np.ndarray:
        return self.w0 - self.w1


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(eq=False)
class PropensityModel:
    """Feed-forward ReLU network with a sigmoid output.

    Inputs are standardised with the training-set column means and standard
    deviations before the first layer.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    shift: np.ndarray
    scale: np.ndarray
    clip: float = 0.01
    loss_history: list[float] = field(default_factory=list)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    def logits(self, x) -> np.ndarray:
        h = (np.asarray(x, dtype=np.float64) - self.shift) / self.scale
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return (h @ self.weights[-1] + self.biases[-1])[:, 0]

    def predict(self, x, clip: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise PropensityError(f"expected feature rows of width {self.d}, got shape {x.shape}")
        p = _sigmoid(self.logits(x))
        if clip and self.clip:
            p = np.clip(p, self.clip, 1.0 - self.clip)
        return p

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "clip": self.clip,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PropensityModel":
        sizes = data["layer_sizes"]
        weights = [
            np.asarray(w, dtype=np.float64).reshape(sizes[k], sizes[k + 1])
            for k, w in enumerate(data["weights"])
        ]
        return cls(
            weights,
            [np.asarray(b, dtype=np.float64) for b in data["biases"]],
            np.asarray(data["shift"], dtype=np.float64),
            np.asarray(data["scale"], dtype=np.float64),
            float(data["clip"]),
        )


def init_model(
    d: int,
    config: PropensityConfig = PropensityConfig(),
    input_keys: Sequence[str] | None = None,
) -> PropensityModel:
    """Glorot-uniform weights and zero biases.

    First-layer rows are drawn from streams keyed by ``input_keys`` (column
    names), so permuting the input columns permutes those rows and leaves the
    network function unchanged.
    """
    sizes = (d, *config.hidden, 1)
    if input_keys is None:
        input_keys = [str(j) for j in range(d)]
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        if k == 0:
            w = np.stack([rng_for(config.seed, "input", key).uniform(-bound, bound, fan_out) for key in input_keys])
        else:
            w = rng_for(config.seed, "layer", k).uniform(-bound, bound, (fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return PropensityModel(weights, biases, np.zeros(d), np.ones(d), config.clip)


def loss_and_grads(model: PropensityModel, x: np.ndarray, a: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean binary cross-entropy and its gradients w.r.t. ``model.parameters()``."""
    h = (x - model.shift) / model.scale
    acts = [h]
    pre = []
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    out = (h @ model.weights[-1] + model.biases[-1])[:, 0]
    loss = float(np.mean(_softplus(out) - a * out))

    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    delta = ((_sigmoid(out) - a) / x.shape[0])[:, None]
    for k in range(len(model.weights) - 1, -1, -1):
        grads_w[k] = acts[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k].T) * (pre[k - 1] > 0)
    return loss, [g for pair in zip(grads_w, grads_b) for g in pair]


def fit_propensity(dataset: Dataset, config: PropensityConfig = PropensityConfig()) -> PropensityModel:
    """Fit ``e(x)`` by mini-batch gradient descent on binary cross-entropy.

    Deterministic given ``config.seed``; ``loss_history`` records the
    full-data loss after each epoch.
    """
    a = dataset.treatment.astype(np.float64)
    if a.min() == a.max():
        raise PropensityError("treatment has a single class; positivity cannot be checked")
    x = dataset.features
    n, d = x.shape
    model = init_model(d, config, dataset.names)
    model.shift = x.mean(axis=0)
    sd = x.std(axis=0)
    model.scale = np.where(sd > 0, sd, 1.0)

    params = model.parameters()
    rng = rng_for(config.seed, "shuffle")
    bs = max(1, int(config.batch_size))
    lr = config.learning_rate
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, grads = loss_and_grads(model, x[idx], a[idx])
            for p, g in zip(params, grads):
                p -= lr * g
        z = model.logits(x)
        history.append(float(np.mean(_softplus(z) - a * z)))
    model.loss_history = history
    return model


def predict_e(model: PropensityModel, x) -> float | np.ndarray:
    """Clamped propensity for one feature row (float) or a matrix of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return float(model.predict(x[None, :])[0])
    return model.predict(x)


def _weights_from_e(treatment: np.ndarray, e: np.ndarray) -> IPWeights:
    a = treatment.astype(bool)
    w1 = np.where(a, 1.0 / e, 0.0)
    w0 = np.where(a, 0.0, 1.0 / (1.0 - e))
    return IPWeights(w0, w1)


def ipw_weights(model: PropensityModel, dataset: Dataset) -> IPWeights:
    if model.d != dataset.d:
        raise PropensityError(f"model expects {model.d} features, dataset has {dataset.d}")
    return _weights_from_e(dataset.treatment, model.predict(dataset.features))


def oracle_weights(
    dataset: Dataset,
    true_e: Callable[[np.ndarray], np.ndarray] | float,
    clip: float | None = 0.01,
) -> IPWeights:
    """Weights from a known propensity function (or constant)."""
    if callable(true_e):
        e = np.asarray(true_e(dataset.features), dtype=np.float64).reshape(dataset.n)
    else:
        e = np.full(dataset.n, float(true_e))
    if clip:
        e = np.clip(e, clip, 1.0 - clip)
    if np.any(e <= 0) or np.any(e >= 1):
        raise PropensityError("propensity values must lie strictly inside (0, 1)")
    return _weights_from_e(dataset.treatment, e)

"""Logistic meta-model over base-model positive-class probabilities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import DegenerateLabels, InvalidConfig


@dataclass
class StackerConfig:
    folds: int = 5
    epochs: int = 100
    step: float = 1.0
    l2: float = 1e-8
    threshold: float = 0.5
    seed: int = 0


@dataclass
class LogisticMeta:
    weights: np.ndarray
    bias: float
    threshold: float = 0.5

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not 0.0 < self.threshold < 1.0:
            raise InvalidConfig(f"threshold must lie in (0, 1), got {self.threshold}")
        if not np.isfinite(self.weights).all() or not np.isfinite(self.bias):
            raise InvalidConfig("meta-model weights must be finite")

    def predict_proba(self, meta_features: np.ndarray) -> np.ndarray:
        return sigmoid(np.asarray(meta_features, dtype=np.float64) @ self.weights + self.bias)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticMeta":
        return cls(np.asarray(d["weights"]), float(d["bias"]), float(d["threshold"]))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def logistic_loss(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, l2: float = 0.0) -> float:
    z = x @ w + b
    # log(1 + exp(z)) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * np.dot(w, w))


def fit_logistic(x: np.ndarray, y: np.ndarray, epochs: int = 100, step: float = 1.0,
                 l2: float = 1e-8) -> Tuple[np.ndarray, float]:
    """Minimize the mean logistic loss with Newton steps (damped by ``step``).

    A tiny ridge keeps the Hessian invertible on separable data.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    for _ in range(epochs):
        p = sigmoid(xa @ theta)
        grad = xa.T @ (p - y) / n + reg * theta
        if np.max(np.abs(grad)) < 1e-12:
            break
        hess = (xa * (p * (1 - p))[:, None]).T @ xa / n + np.diag(reg + 1e-12)
        theta = theta - step * np.linalg.solve(hess, grad)
    return theta[:-1], float(theta[-1])


def fit_stacked_detector(base_probs_oof: np.ndarray, labels, config: Optional[StackerConfig] = None) -> LogisticMeta:
    """Fit the meta-model on out-of-fold base probabilities ``[gcn, forest]``."""
    config = config or StackerConfig()
    x = np.asarray(base_probs_oof, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"meta-features {x.shape} do not match {y.shape[0]} labels")
    if np.any((x < 0) | (x > 1)):
        raise ValueError("base probabilities must lie in [0, 1]")
    if set(np.unique(y).tolist()) != {0, 1}:
        raise DegenerateLabels("meta-model needs both classes")
    w, b = fit_logistic(x, y, config.epochs, config.step, config.l2)
    return LogisticMeta(w, b, config.threshold)


def stacked_predict(meta: LogisticMeta, gcn_prob: float, forest_prob: float) -> Tuple[float, bool]:
    p = float(sigmoid(float(meta.weights[0] * gcn_prob + meta.weights[1] * forest_prob + meta.bias)))
    return p, p >= meta.threshold


def assign_folds(n: int, k: int, seed: int, labels=None) -> np.ndarray:
    """Fold id per sample; stratified by label when given so every fold sees both classes."""
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    if labels is None:
        perm = rng.permutation(n)
        folds[perm] = np.arange(n) % k
        return folds
    labels = np.asarray(labels)
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        perm = rng.permutation(members)
        folds[perm] = (np.arange(perm.shape[0]) + offset) % k
        offset += perm.shape[0]
    return folds


def assign_group_folds(groups, labels, k: int, seed: int) -> np.ndarray:
    """Fold id per sample with every group (e.g. source IP) kept inside one fold.

    Groups holding positives are spread first, each to the fold with the
    fewest positives so far; the rest go to the fold with the fewest samples.
    Falls back to stratified sample folds when grouping would leave some
    fold's training complement single-class.
    """
    groups = np.asarray(groups)
    labels = np.asarray(labels, dtype=np.int64)
    uniq, inv = np.unique(groups, return_inverse=True)
    rng = np.random.default_rng(seed)
    order = rng.permutation(uniq.shape[0])
    pos = np.bincount(inv, weights=labels, minlength=uniq.shape[0])
    size = np.bincount(inv, minlength=uniq.shape[0])
    fold_of_group = np.empty(uniq.shape[0], dtype=np.int64)
    fold_pos = np.zeros(k)
    fold_size = np.zeros(k)
    for g in [g for g in order if pos[g] > 0] + [g for g in order if pos[g] == 0]:
        f = int(np.argmin(fold_pos)) if pos[g] > 0 else int(np.argmin(fold_size))
        fold_of_group[g] = f
        fold_pos[f] += pos[g]
        fold_size[f] += size[g]
    folds = fold_of_group[inv]
    for f in range(k):
        rest = labels[folds != f]
        if rest.size == 0 or rest.min() == rest.max():
            return assign_folds(labels.shape[0], k, seed, labels)
    return folds


@dataclass
class OofRecord:
    """Which fold produced each sample's meta-features, and what each fold model trained on."""

    fold_of_sample: np.ndarray
    train_masks: list = field(default_factory=list)

    def check(self) -> None:
        for k, mask in enumerate(self.train_masks):
            if np.any(mask & (self.fold_of_sample == k)):
                raise AssertionError(f"fold {k} model trained on samples it predicted")

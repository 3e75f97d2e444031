"""Random forest of Gini decision trees for binary labels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import kernels
from .errors import DegenerateLabels, DimensionMismatch


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 16
    min_samples_leaf: int = 2
    max_features: Optional[int] = None  # None -> ceil(sqrt(F))
    seed: int = 0


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


@dataclass
class DecisionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf.

    ``value[k]`` is the leaf class-frequency vector (Other, Stage).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return self.feature.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``x``."""
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = x[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "counts", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["counts"], dtype=np.int64).reshape(-1, 2),
                   np.asarray(d["value"], dtype=np.float64).reshape(-1, 2))


def fit_tree(x: np.ndarray, y: np.ndarray, samples: np.ndarray, max_depth: int, min_samples_leaf: int,
             max_features: int, rng: np.random.Generator) -> DecisionTree:
    """Grow one tree depth-first on ``samples`` (row indices, repeats allowed)."""
    n_features = x.shape[1]
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        c1 = int(y[idx].sum())
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append((idx.shape[0] - c1, c1))
        return len(feature) - 1

    root = new_node(samples)
    stack = [(root, samples, 0)]
    while stack:
        node, idx, depth = stack.pop()
        c0, c1 = counts[node]
        n = c0 + c1
        if depth >= max_depth or c0 == 0 or c1 == 0 or n < 2 * min_samples_leaf:
            continue
        feats = np.sort(rng.choice(n_features, size=max_features, replace=False)).astype(np.int64)
        f, thr, score = kernels.best_split(x, y, idx, feats, min_samples_leaf)
        parent_score = (c0 * c0 + c1 * c1) / n
        if f < 0 or not score > parent_score * (1 + 1e-12):
            continue
        goes_left = x[idx, f] <= thr
        li = new_node(idx[goes_left])
        ri = new_node(idx[~goes_left])
        feature[node], threshold[node], left[node], right[node] = f, thr, li, ri
        # right pushed first so the left subtree is numbered first
        stack.append((ri, idx[~goes_left], depth + 1))
        stack.append((li, idx[goes_left], depth + 1))

    counts_arr = np.asarray(counts, dtype=np.int64).reshape(-1, 2)
    value = counts_arr / counts_arr.sum(axis=1, keepdims=True)
    return DecisionTree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=np.float64),
                        np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64), counts_arr, value)


@dataclass
class RandomForest:
    trees: List[DecisionTree]
    n_features: int
    max_features: int
    seed: int

    @property
    def tree_count(self) -> int:
        return len(self.trees)

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "max_features": self.max_features, "seed": self.seed,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForest":
        return cls([DecisionTree.from_dict(t) for t in d["trees"]], int(d["n_features"]),
                   int(d["max_features"]), int(d["seed"]))


def tree_seeds(seed: int, n_trees: int) -> List[np.random.SeedSequence]:
    """Independent per-tree streams; tree k gets the same stream however trees are scheduled."""
    return np.random.SeedSequence(seed).spawn(n_trees)


def bootstrap_indices(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n).astype(np.int64)


def fit_single(x, y, seed_seq, config: ForestConfig, max_features: int) -> DecisionTree:
    rng = np.random.default_rng(seed_seq)
    samples = bootstrap_indices(rng, x.shape[0])
    return fit_tree(x, y, samples, config.max_depth, config.min_samples_leaf, max_features, rng)


def fit_forest(features: np.ndarray, binary_labels, config: Optional[ForestConfig] = None) -> RandomForest:
    config = config or ForestConfig()
    x = np.ascontiguousarray(features, dtype=np.float64)
    y = np.ascontiguousarray(binary_labels, dtype=np.int64)
    if x.shape[0] < 2:
        raise DegenerateLabels("forest needs at least two samples")
    if set(np.unique(y).tolist()) != {0, 1}:
        raise DegenerateLabels(f"forest needs both classes, found {np.unique(y).tolist()}")
    n_features = x.shape[1]
    m = config.max_features or math.ceil(math.sqrt(n_features))
    m = max(1, min(m, n_features))
    trees = [fit_single(x, y, s, config, m) for s in tree_seeds(config.seed, config.n_trees)]
    return RandomForest(trees, n_features, m, config.seed)


def forest_predict_proba(forest: RandomForest, features: np.ndarray) -> np.ndarray:
    """Mean of the per-tree leaf frequency vectors (soft voting)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != forest.n_features:
        raise DimensionMismatch(f"expected {forest.n_features} features, got shape {x.shape}")
    acc = np.zeros((x.shape[0], 2))
    for t in forest.trees:
        acc += t.predict_proba(x)
    return acc / forest.tree_count

"""Graph convolutional network trained from scratch.

Each graph layer computes ``H'_i = act(sum_{j in N(i)} c_ij H_j W)`` with
``c_ij = 1/sqrt(|N(i)| |N(j)|)``. ReLU follows every graph layer except the
last, whose output is the node embedding. A linear + softmax head turns
embeddings into (Other, Stage) probabilities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateLabels, DimensionMismatch, EmptyMask, IndexOutOfRange, NumericalDivergence
from .graph import FlowGraph
from .optim import Adam

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class GcnConfig:
    hidden_dim: int = 32
    layers: int = 2
    epochs: int = 300
    step_size: float = 0.01
    seed: int = 0


@dataclass
class GcnModel:
    layer_weights: List[np.ndarray]
    head_weights: np.ndarray
    head_bias: np.ndarray
    seed: int = 0

    def __post_init__(self):
        for a, b in zip(self.layer_weights, self.layer_weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise DimensionMismatch(f"layer dims do not chain: {a.shape} -> {b.shape}")
        if self.head_weights.shape != (self.embedding_dim, 2) or self.head_bias.shape != (2,):
            raise DimensionMismatch("head must be D x 2 with a 2-vector bias")

    @property
    def layer_count(self) -> int:
        return len(self.layer_weights)

    @property
    def input_dim(self) -> int:
        return self.layer_weights[0].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.layer_weights[-1].shape[1]

    @property
    def params(self) -> List[np.ndarray]:
        return [*self.layer_weights, self.head_weights, self.head_bias]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int = 32, layers: int = 2, seed: int = 0) -> "GcnModel":
        """Glorot-uniform weights, zero head bias."""
        rng = np.random.default_rng(seed)
        dims = [input_dim] + [hidden_dim] * layers
        ws = []
        for d_in, d_out in zip(dims, dims[1:]):
            lim = np.sqrt(6.0 / (d_in + d_out))
            ws.append(rng.uniform(-lim, lim, size=(d_in, d_out)))
        lim = np.sqrt(6.0 / (hidden_dim + 2))
        return cls(ws, rng.uniform(-lim, lim, size=(hidden_dim, 2)), np.zeros(2), seed)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "layer_weights": [w.tolist() for w in self.layer_weights],
            "head_weights": self.head_weights.tolist(),
            "head_bias": self.head_bias.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GcnModel":
        return cls([np.asarray(w, dtype=np.float64) for w in d["layer_weights"]],
                   np.asarray(d["head_weights"], dtype=np.float64),
                   np.asarray(d["head_bias"], dtype=np.float64), int(d["seed"]))


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    node_index: int
    window_id: int


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gcn_layer_forward(graph: FlowGraph, h: np.ndarray, w: np.ndarray, apply_activation: bool) -> np.ndarray:
    if h.shape[1] != w.shape[0]:
        raise DimensionMismatch(f"H has {h.shape[1]} columns, W has {w.shape[0]} rows")
    z = graph.aggregate(h) @ w
    return np.maximum(z, 0.0) if apply_activation else z


@dataclass
class _Trace:
    aggregated: List[np.ndarray] = field(default_factory=list)
    pre_act: List[np.ndarray] = field(default_factory=list)
    embeddings: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None


def _rowwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS blocks rows differently depending on where they sit, so the same row
    # can round differently after a relabeling. einsum stays row-local.
    return np.einsum("ij,jk->ik", a, b)


def _forward(model: GcnModel, graph: FlowGraph, first_agg: Optional[np.ndarray] = None,
             exact: bool = False) -> _Trace:
    if graph.node_features.shape[1] != model.input_dim:
        raise DimensionMismatch(f"graph has {graph.node_features.shape[1]} features, model expects {model.input_dim}")
    tr = _Trace()
    h = graph.node_features
    last = model.layer_count - 1
    for l, w in enumerate(model.layer_weights):
        agg = first_agg if (l == 0 and first_agg is not None) else graph.aggregate(h, exact)
        z = _rowwise(agg, w) if exact else agg @ w
        h = np.maximum(z, 0.0) if l < last else z
        tr.aggregated.append(agg)
        tr.pre_act.append(z)
    tr.embeddings = h
    logits = _rowwise(h, model.head_weights) if exact else h @ model.head_weights
    tr.probs = softmax(logits + model.head_bias)
    return tr


def gcn_forward(model: GcnModel, graph: FlowGraph) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(class_probs N x 2, embeddings N x D)``.

    Inference is exactly equivariant: relabeling the nodes permutes the rows
    of both outputs and changes no bits. Training uses the faster
    neighbor-order sums.
    """
    tr = _forward(model, graph, exact=True)
    return tr.probs, tr.embeddings


def cross_entropy_loss(class_probs: np.ndarray, labels, mask=None) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.ones(labels.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("loss mask selects no nodes")
    p = np.clip(class_probs[np.flatnonzero(mask), labels[mask]], PROB_CLAMP, 1.0)
    return float(-np.mean(np.log(p)))


def loss_and_grads(model: GcnModel, graph: FlowGraph, labels, mask,
                   first_agg: Optional[np.ndarray] = None) -> Tuple[float, List[np.ndarray]]:
    """Masked mean cross-entropy and its gradient w.r.t. ``model.params``."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    tr = _forward(model, graph, first_agg)
    loss = cross_entropy_loss(tr.probs, labels, mask)

    n_mask = float(mask.sum())
    d_logits = tr.probs.copy()
    d_logits[np.arange(labels.shape[0]), labels] -= 1.0
    d_logits *= mask[:, None] / n_mask
    g_head_w = tr.embeddings.T @ d_logits
    g_head_b = d_logits.sum(axis=0)
    d_h = d_logits @ model.head_weights.T

    last = model.layer_count - 1
    g_layers: List[np.ndarray] = [None] * model.layer_count
    for l in range(last, -1, -1):
        d_z = d_h if l == last else d_h * (tr.pre_act[l] > 0)
        g_layers[l] = tr.aggregated[l].T @ d_z
        if l > 0:
            # normalized adjacency is symmetric, so its transpose is itself
            d_h = graph.aggregate(d_z @ model.layer_weights[l].T)
    return loss, [*g_layers, g_head_w, g_head_b]


def train_gcn(graph: FlowGraph, binary_labels, train_mask=None,
              config: Optional[GcnConfig] = None) -> Tuple[GcnModel, List[float]]:
    """Full-batch Adam on the masked cross-entropy. Returns the model and per-epoch loss."""
    config = config or GcnConfig()
    labels = np.asarray(binary_labels, dtype=np.int64)
    mask = np.ones(labels.shape[0], dtype=bool) if train_mask is None else np.asarray(train_mask, dtype=bool)
    present = set(np.unique(labels[mask]).tolist())
    if present != {0, 1}:
        raise DegenerateLabels(f"GCN training needs both classes under the mask, found {sorted(present)}")
    model = GcnModel.init(graph.node_features.shape[1], config.hidden_dim, config.layers, config.seed)
    opt = Adam(model.params, step_size=config.step_size)
    first_agg = graph.aggregate(graph.node_features)
    losses = []
    for epoch in range(config.epochs):
        loss, grads = loss_and_grads(model, graph, labels, mask, first_agg)
        losses.append(loss)
        opt.step(grads)
        if not all(np.isfinite(p).all() for p in model.params):
            raise NumericalDivergence(f"non-finite GCN weights at epoch {epoch}")
    return model, losses


def extract_embeddings(model: GcnModel, graph: FlowGraph, node_indices: Sequence[int],
                       embeddings: Optional[np.ndarray] = None) -> List[Embedding]:
    """Last-graph-layer vectors for the requested nodes.

    ``embeddings`` may carry a precomputed forward pass to avoid recomputing it.
    """
    idx = [int(i) for i in node_indices]
    for i in idx:
        if not 0 <= i < graph.node_count:
            raise IndexOutOfRange(f"node {i} outside [0, {graph.node_count})")
    if not idx:
        return []
    if embeddings is None:
        _, embeddings = gcn_forward(model, graph)
    wid = graph.window_ids
    return [Embedding(embeddings[i].copy(), i, int(wid[i]) if wid is not None else 0) for i in idx]

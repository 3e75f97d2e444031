"""Per-target Access-Exploitation (AE) prediction with a two-input RNN.

Each target IP that was flagged for stages 1 and 2 becomes one sample: the
embeddings of its stage-1 alerts and of its stage-2 alerts, oldest first,
each cut to the newest ``T`` and post-padded with a validity mask. The RNN
reads both sequences in lockstep,

    h_t = tanh(W_hx1 x1_t + W_hx2 x2_t + W_hh h_{t-1} + b_h)

where a masked input contributes nothing and a step with both inputs masked
leaves ``h`` untouched, so padding is an exact no-op. A softmax head on the
final state gives (no AE, AE) probabilities.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import bundle
from .detector import Detection
from .errors import BundleFormatError, DegenerateLabels, DimensionMismatch, EmptyDataset, NumericalDivergence
from .flow_model import LabeledDataset, StageLabel
from .gcn import PROB_CLAMP, softmax
from .optim import Adam

logger = logging.getLogger(__name__)

DEFAULT_T = 16


@dataclass
class AeSample:
    """seq1/seq2 are T x D with masks marking real (True) rows; padding rows are zero."""

    target_ip: str
    seq1: np.ndarray
    seq2: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray
    label: int
    last_stage2_ts: float = float("nan")

    def __post_init__(self):
        self.seq1 = np.asarray(self.seq1, dtype=np.float64)
        self.seq2 = np.asarray(self.seq2, dtype=np.float64)
        self.mask1 = np.asarray(self.mask1, dtype=bool)
        self.mask2 = np.asarray(self.mask2, dtype=bool)
        if self.seq1.shape != self.seq2.shape or self.seq1.ndim != 2:
            raise DimensionMismatch(f"sequences must share a T x D shape, got {self.seq1.shape} and {self.seq2.shape}")
        if self.mask1.shape != (self.seq1.shape[0],) or self.mask2.shape != (self.seq2.shape[0],):
            raise DimensionMismatch("masks must have one entry per step")

    @property
    def steps(self) -> int:
        return self.seq1.shape[0]

    @property
    def dim(self) -> int:
        return self.seq1.shape[1]

    def padded(self, extra: int) -> "AeSample":
        """The same sample with ``extra`` fully masked steps appended."""
        z = np.zeros((extra, self.dim))
        off = np.zeros(extra, dtype=bool)
        return AeSample(self.target_ip, np.vstack([self.seq1, z]), np.vstack([self.seq2, z]),
                        np.concatenate([self.mask1, off]), np.concatenate([self.mask2, off]),
                        self.label, self.last_stage2_ts)

    def to_dict(self) -> dict:
        return {"target_ip": self.target_ip, "label": int(self.label), "T": self.steps,
                "last_stage2_ts": self.last_stage2_ts,
                "seq1": self.seq1[self.mask1].tolist(), "seq2": self.seq2[self.mask2].tolist()}

    @classmethod
    def from_dict(cls, d: dict, dim: int) -> "AeSample":
        t = int(d["T"])
        s1, m1 = _pad(np.asarray(d["seq1"], dtype=np.float64).reshape(-1, dim), t)
        s2, m2 = _pad(np.asarray(d["seq2"], dtype=np.float64).reshape(-1, dim), t)
        return cls(d["target_ip"], s1, s2, m1, m2, int(d["label"]), float(d["last_stage2_ts"]))


def _pad(vectors: np.ndarray, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """Keep the newest ``t`` rows, zero-pad after them."""
    vectors = vectors[-t:] if t > 0 else vectors[:0]
    out = np.zeros((t, vectors.shape[1]))
    out[:vectors.shape[0]] = vectors
    mask = np.zeros(t, dtype=bool)
    mask[:vectors.shape[0]] = True
    return out, mask


def build_ae_dataset(detection: Detection, truth: LabeledDataset, T: int = DEFAULT_T,
                     horizon: Optional[float] = None) -> List[AeSample]:
    """One sample per destination IP with at least one stage-1 and one stage-2 flagged flow.

    ``detection`` must come from running the detectors over ``truth`` itself
    (embedding node indices are flow indices of ``truth``). The label is 1
    when ``truth`` holds a Stage3 flow to the target strictly after its last
    stage-2 alert and, if ``horizon`` is set, at most ``horizon`` seconds later.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    per_target: Dict[str, Dict[int, list]] = {}
    for stage in (1, 2):
        for emb in detection.embeddings.get(stage, []):
            flow = truth.flows[emb.node_index]
            per_target.setdefault(flow.dst_ip, {1: [], 2: []})[stage].append(
                (flow.timestamp, emb.node_index, emb.vector))
    stage3: Dict[str, List[float]] = {}
    for f, lab in zip(truth.flows, truth.stage_labels):
        if lab is StageLabel.STAGE3:
            stage3.setdefault(f.dst_ip, []).append(f.timestamp)
    samples = []
    for ip in sorted(per_target):
        seqs = per_target[ip]
        if not seqs[1] or not seqs[2]:
            continue
        for s in (1, 2):
            seqs[s].sort(key=lambda r: (r[0], r[1]))
        last2 = seqs[2][-1][0]
        later = [ts for ts in stage3.get(ip, []) if ts > last2 and (horizon is None or ts - last2 <= horizon)]
        s1, m1 = _pad(np.array([r[2] for r in seqs[1]]), T)
        s2, m2 = _pad(np.array([r[2] for r in seqs[2]]), T)
        samples.append(AeSample(ip, s1, s2, m1, m2, int(bool(later)), last2))
    if not samples:
        raise EmptyDataset("no target received both stage-1 and stage-2 alerts")
    return samples


@dataclass
class AeConfig:
    T: int = DEFAULT_T
    horizon: Optional[float] = None
    hidden_dim: int = 16
    epochs: int = 300
    step_size: float = 0.01
    clip_norm: float = 5.0
    threshold: float = 0.5
    # early stopping on a stratified slice of the training targets; 0 disables it
    val_fraction: float = 0.2
    patience: int = 50
    min_delta: float = 0.05
    seed: int = 0


@dataclass
class MultiInputRnn:
    """Weights follow the column-vector convention: ``W_hx1`` is H x D, ``W_yh`` is 2 x H.

    ``x_mean``/``x_scale`` standardize inputs before the recurrence
    (identity by default); they are fitted on the training embeddings.
    """

    w_hx1: np.ndarray
    w_hx2: np.ndarray
    w_hh: np.ndarray
    b_h: np.ndarray
    w_yh: np.ndarray
    b_y: np.ndarray
    seed: int = 0
    x_mean: Optional[np.ndarray] = None
    x_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        h, d = self.w_hx1.shape
        if self.w_hx2.shape != (h, d) or self.w_hh.shape != (h, h) or self.b_h.shape != (h,):
            raise DimensionMismatch("recurrent weights do not chain")
        if self.w_yh.shape != (2, h) or self.b_y.shape != (2,):
            raise DimensionMismatch("head must be 2 x H with a 2-vector bias")
        if self.x_mean is None:
            self.x_mean = np.zeros(d)
        if self.x_scale is None:
            self.x_scale = np.ones(d)

    @property
    def hidden_dim(self) -> int:
        return self.w_hh.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_hx1.shape[1]

    @property
    def params(self) -> List[np.ndarray]:
        return [self.w_hx1, self.w_hx2, self.w_hh, self.b_h, self.w_yh, self.b_y]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int = 16, seed: int = 0) -> "MultiInputRnn":
        """Glorot-uniform recurrent weights; zero head, so the untrained model outputs (0.5, 0.5)."""
        rng = np.random.default_rng(seed)

        def glorot(rows, cols):
            lim = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-lim, lim, size=(rows, cols))

        return cls(glorot(hidden_dim, input_dim), glorot(hidden_dim, input_dim), glorot(hidden_dim, hidden_dim),
                   np.zeros(hidden_dim), np.zeros((2, hidden_dim)), np.zeros(2), seed)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "MultiInputRnn":
        h, d = hidden_dim, input_dim
        return cls(np.zeros((h, d)), np.zeros((h, d)), np.zeros((h, h)), np.zeros(h), np.zeros((2, h)), np.zeros(2))

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_scale

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in ("w_hx1", "w_hx2", "w_hh", "b_h", "w_yh", "b_y", "x_mean", "x_scale")}
        d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MultiInputRnn":
        arr = {k: np.asarray(d[k], dtype=np.float64)
               for k in ("w_hx1", "w_hx2", "w_hh", "b_h", "w_yh", "b_y", "x_mean", "x_scale")}
        return cls(seed=int(d["seed"]), **arr)


def rnn_step(model: MultiInputRnn, x1, x2, h_prev, masks=(True, True)) -> np.ndarray:
    """One recurrence step on raw (unstandardized) inputs."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != (model.input_dim,) or x2.shape != (model.input_dim,) or h_prev.shape != (model.hidden_dim,):
        raise DimensionMismatch(f"expected D={model.input_dim}, H={model.hidden_dim} vectors")
    m1, m2 = bool(masks[0]), bool(masks[1])
    if not (m1 or m2):
        return h_prev.copy()
    z = model.w_hh @ h_prev + model.b_h
    if m1:
        z = z + model.w_hx1 @ model.standardize(x1)
    if m2:
        z = z + model.w_hx2 @ model.standardize(x2)
    return np.tanh(z)


def _stack(samples: Sequence[AeSample]):
    t = {s.steps for s in samples}
    if len(t) != 1:
        raise DimensionMismatch(f"samples have different lengths {sorted(t)}")
    return (np.stack([s.seq1 for s in samples]), np.stack([s.mask1 for s in samples]),
            np.stack([s.seq2 for s in samples]), np.stack([s.mask2 for s in samples]))


def _forward_batch(model: MultiInputRnn, x1, m1, x2, m2):
    """Batched recurrence. Returns (probs N x 2, cache for backprop)."""
    n, t, d = x1.shape
    if d != model.input_dim:
        raise DimensionMismatch(f"inputs have D={d}, model expects {model.input_dim}")
    # masked rows become exact zeros after standardization
    u1 = np.where(m1[..., None], model.standardize(x1), 0.0)
    u2 = np.where(m2[..., None], model.standardize(x2), 0.0)
    active = m1 | m2
    h = np.zeros((n, model.hidden_dim))
    hs, news = [h], []
    for k in range(t):
        z = u1[:, k] @ model.w_hx1.T + u2[:, k] @ model.w_hx2.T + h @ model.w_hh.T + model.b_h
        new = np.tanh(z)
        h = np.where(active[:, k, None], new, h)
        hs.append(h)
        news.append(new)
    logits = h @ model.w_yh.T + model.b_y
    return softmax(logits), (u1, u2, active, hs, news)


def rnn_forward(model: MultiInputRnn, sample: AeSample) -> np.ndarray:
    probs, _ = _forward_batch(model, *(a[None] for a in (sample.seq1, sample.mask1, sample.seq2, sample.mask2)))
    return probs[0]


def rnn_forward_many(model: MultiInputRnn, samples: Sequence[AeSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 2))
    return _forward_batch(model, *_stack(samples))[0]


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Inverse class frequency, scaled so the weights average to 1 over the samples."""
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    return labels.shape[0] / (2.0 * counts)


def loss_and_grads(model: MultiInputRnn, x1, m1, x2, m2, labels, weights=None):
    """Weighted mean cross-entropy and its gradients by backpropagation through time."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    probs, (u1, u2, active, hs, news) = _forward_batch(model, x1, m1, x2, m2)
    p_true = np.clip(probs[np.arange(n), labels], PROB_CLAMP, 1.0)
    loss = float(np.sum(w * -np.log(p_true)) / n)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= (w / n)[:, None]
    h_last = hs[-1]
    g_wyh = dlogits.T @ h_last
    g_by = dlogits.sum(axis=0)
    dh = dlogits @ model.w_yh
    g1 = np.zeros_like(model.w_hx1)
    g2 = np.zeros_like(model.w_hx2)
    ghh = np.zeros_like(model.w_hh)
    gb = np.zeros_like(model.b_h)
    for k in range(u1.shape[1] - 1, -1, -1):
        a = active[:, k, None]
        dz = np.where(a, dh * (1.0 - news[k] ** 2), 0.0)
        g1 += dz.T @ u1[:, k]
        g2 += dz.T @ u2[:, k]
        ghh += dz.T @ hs[k]
        gb += dz.sum(axis=0)
        dh = dz @ model.w_hh + np.where(a, 0.0, dh)
    return loss, [g1, g2, ghh, gb, g_wyh, g_by]


def fit_scaler(samples: Sequence[AeSample]) -> Tuple[np.ndarray, np.ndarray]:
    rows = [s.seq1[s.mask1] for s in samples] + [s.seq2[s.mask2] for s in samples]
    x = np.vstack(rows)
    scale = x.std(axis=0)
    return x.mean(axis=0), np.where(scale > 1e-12, scale, 1.0)


def _stratified_holdout(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask of held-out samples, at least one per class when the class has two or more."""
    rng = np.random.default_rng(seed)
    held = np.zeros(labels.shape[0], dtype=bool)
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)
        k = int(round(fraction * idx.shape[0]))
        if idx.shape[0] >= 2:
            k = min(max(k, 1), idx.shape[0] - 1)
        held[rng.permutation(idx)[:k]] = True
    return held


def train_rnn(samples: Sequence[AeSample], config: Optional[AeConfig] = None) -> Tuple[MultiInputRnn, List[float]]:
    """Full-batch Adam on class-weighted cross-entropy, clipped at a global norm.

    With ``val_fraction > 0`` a stratified slice of the samples is held out
    and the returned weights are those of the epoch with the lowest held-out
    loss, counting only improvements larger than ``min_delta``; epoch 0 is
    the untrained model, so a run that never generalizes returns the
    uninformative (0.5, 0.5) predictor. The loss curve is the training loss.
    """
    config = config or AeConfig()
    if not samples:
        raise EmptyDataset("no AE samples to train on")
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    if set(np.unique(labels).tolist()) != {0, 1}:
        raise DegenerateLabels(f"AE training needs both labels, found {sorted(set(labels.tolist()))}")
    held = np.zeros(labels.shape[0], dtype=bool)
    if config.val_fraction > 0:
        held = _stratified_holdout(labels, config.val_fraction, config.seed)
        if set(np.unique(labels[~held]).tolist()) != {0, 1} or not held.any():
            held[:] = False
    fit = [s for s, h in zip(samples, held) if not h]
    x1, m1, x2, m2 = _stack(fit)
    y = labels[~held]
    model = MultiInputRnn.init(x1.shape[2], config.hidden_dim, config.seed)
    model.x_mean, model.x_scale = fit_scaler(fit)
    weights = class_weights(y)[y]
    if held.any():
        val = _stack([s for s, h in zip(samples, held) if h])
        vy = labels[held]
        vw = class_weights(labels)[vy]
        best_loss = loss_and_grads(model, *val, vy, vw)[0]
        best = [p.copy() for p in model.params]
        since = 0
    opt = Adam(model.params, step_size=config.step_size, clip_norm=config.clip_norm)
    losses = []
    for epoch in range(config.epochs):
        loss, grads = loss_and_grads(model, x1, m1, x2, m2, y, weights)
        if not np.isfinite(loss):
            raise NumericalDivergence(f"non-finite AE loss at epoch {epoch}")
        losses.append(loss)
        opt.step(grads)
        if not all(np.isfinite(p).all() for p in model.params):
            raise NumericalDivergence(f"non-finite RNN weights at epoch {epoch}")
        if held.any():
            vloss = loss_and_grads(model, *val, vy, vw)[0]
            if vloss < best_loss - config.min_delta:
                best_loss, best, since = vloss, [p.copy() for p in model.params], 0
            else:
                since += 1
                if since >= config.patience:
                    break
    if held.any():
        for p, b in zip(model.params, best):
            p[...] = b
    return model, losses


def predict_target_risk(model: MultiInputRnn, sample: AeSample, threshold: float = 0.5) -> Tuple[float, bool]:
    p = float(rnn_forward(model, sample)[1])
    return p, p >= threshold


def split_targets(samples: Sequence[AeSample], test_fraction: float = 0.3,
                  seed: int = 0) -> Tuple[List[AeSample], List[AeSample]]:
    """Label-stratified split of targets into train and held-out sets."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for lab in (0, 1):
        group = [s for s in samples if s.label == lab]
        order = rng.permutation(len(group))
        n_test = int(round(test_fraction * len(group)))
        if len(group) >= 2:
            n_test = min(max(n_test, 1), len(group) - 1)
        for rank, i in enumerate(order):
            (test if rank < n_test else train).append(group[i])
    key = lambda s: s.target_ip  # noqa: E731
    return sorted(train, key=key), sorted(test, key=key)


AE_DATASET_KIND = "ae-dataset"


def write_ae_dataset(samples: Sequence[AeSample], path) -> None:
    """Line-delimited JSON: a version line, then one record per target."""
    dim = samples[0].dim if samples else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"stageids-{AE_DATASET_KIND} v{bundle.FORMAT_VERSION} dim={dim}\n")
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def read_ae_dataset(path) -> List[AeSample]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise BundleFormatError(f"{path}: empty file")
    head = lines[0].split()
    expected = [f"stageids-{AE_DATASET_KIND}", f"v{bundle.FORMAT_VERSION}"]
    if head[:2] != expected or len(head) != 3 or not head[2].startswith("dim="):
        raise BundleFormatError(f"{path}: expected header '{' '.join(expected)} dim=<D>', found {lines[0]!r}")
    dim = int(head[2][4:])
    try:
        return [AeSample.from_dict(json.loads(line), dim) for line in lines[1:] if line.strip()]
    except (json.JSONDecodeError, KeyError) as exc:
        raise BundleFormatError(f"{path}: bad record ({exc})") from None


@dataclass
class AePredictor:
    model: MultiInputRnn
    config: AeConfig = field(default_factory=AeConfig)

    def save(self, path) -> None:
        cfg = {k: getattr(self.config, k) for k in self.config.__dataclass_fields__}
        bundle.write(path, "ae-model", {"model": self.model.to_dict(), "config": cfg})

    @classmethod
    def load(cls, path) -> "AePredictor":
        d = bundle.read(path, "ae-model")
        return cls(MultiInputRnn.from_dict(d["model"]), AeConfig(**d["config"]))


RISK_HEADER = ["target_ip", "probability", "will_be_attacked", "label"]


def risk_rows(model: MultiInputRnn, samples: Sequence[AeSample], threshold: float = 0.5) -> List[list]:
    probs = rnn_forward_many(model, samples)
    return [[s.target_ip, repr(float(p)), int(p >= threshold), s.label] for s, p in zip(samples, probs[:, 1])]


def majority_baseline_f1(train_labels, test_labels) -> Tuple[int, float]:
    """F1 of always predicting the training majority class (ties go to the positive class)."""
    from .evaluation import compute_metrics

    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=bool)
    majority = int(train_labels.mean() >= 0.5)
    return majority, compute_metrics(np.full(test_labels.shape[0], bool(majority)), test_labels).f1


def evaluate_ae(model: MultiInputRnn, train: Sequence[AeSample], test: Sequence[AeSample],
                threshold: float = 0.5) -> dict:
    """Held-out metrics next to the majority-class baseline."""
    from .evaluation import compute_metrics

    y = np.asarray([s.label for s in test], dtype=bool)
    probs = rnn_forward_many(model, test)[:, 1]
    m = compute_metrics(probs >= threshold, y)
    majority, base = majority_baseline_f1([s.label for s in train], y)
    return {"f1": m.f1, "precision": m.precision, "recall": m.recall, "fpr": m.fpr,
            "baseline_f1": base, "majority_class": majority, "n_train": len(train), "n_test": len(test),
            "test_positives": int(y.sum())}

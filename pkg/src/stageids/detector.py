"""Three independent binary stage detectors (GCN + forest stacked by logistic regression)."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import bundle
from .errors import BundleFormatError, DegenerateLabels, SchemaMismatch
from .flow_model import FeatureSchema, LabeledDataset, binarize_for_stage, preprocess_features
from .forest import ForestConfig, RandomForest, fit_forest, forest_predict_proba
from .gcn import Embedding, GcnConfig, GcnModel, gcn_forward, train_gcn
from .graph import DEFAULT_BUCKET_CAP, DEFAULT_WINDOW, FlowGraph, Window, build_flow_graph, union_graphs, window_flows
from .stacker import (LogisticMeta, OofRecord, StackerConfig, assign_folds, assign_group_folds,
                      fit_stacked_detector)

logger = logging.getLogger(__name__)

STAGES = (1, 2, 3)
EMBEDDING_STAGES = (1, 2)


@dataclass
class DetectorConfig:
    window_size: int = DEFAULT_WINDOW
    stride: Optional[int] = None
    self_loops: bool = True
    bucket_cap: int = DEFAULT_BUCKET_CAP
    gcn: GcnConfig = field(default_factory=GcnConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    stacker: StackerConfig = field(default_factory=StackerConfig)
    thresholds: Dict[int, float] = field(default_factory=lambda: {1: 0.5, 2: 0.5, 3: 0.5})
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = {str(k): v for k, v in self.thresholds.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["gcn"] = GcnConfig(**d["gcn"])
        d["forest"] = ForestConfig(**d["forest"])
        d["stacker"] = StackerConfig(**d["stacker"])
        d["thresholds"] = {int(k): float(v) for k, v in d["thresholds"].items()}
        return cls(**d)


def derive_seed(seed: int, *path: int) -> int:
    """Deterministic child seed for (stage, fold, ...) positions."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


@dataclass
class StageDetector:
    stage: int
    gcn: GcnModel
    forest: RandomForest
    meta: LogisticMeta
    schema: FeatureSchema

    def to_dict(self) -> dict:
        return {"stage": self.stage, "gcn": self.gcn.to_dict(), "forest": self.forest.to_dict(),
                "meta": self.meta.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, schema: FeatureSchema) -> "StageDetector":
        return cls(int(d["stage"]), GcnModel.from_dict(d["gcn"]), RandomForest.from_dict(d["forest"]),
                   LogisticMeta.from_dict(d["meta"]), schema)


@dataclass
class DetectorSet:
    """Fitted detectors keyed by stage, the shared schema, and per-stage training failures."""

    detectors: Dict[int, StageDetector]
    schema: FeatureSchema
    config: DetectorConfig
    errors: Dict[int, str] = field(default_factory=dict)
    oof: Dict[int, OofRecord] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "schema": self.schema.to_dict(),
            "detectors": {str(s): d.to_dict() for s, d in sorted(self.detectors.items())},
            "errors": {str(s): e for s, e in sorted(self.errors.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorSet":
        schema = FeatureSchema.from_dict(d["schema"])
        dets = {int(s): StageDetector.from_dict(v, schema) for s, v in d["detectors"].items()}
        return cls(dets, schema, DetectorConfig.from_dict(d["config"]), {int(s): e for s, e in d["errors"].items()})

    def save(self, path) -> None:
        bundle.write(path, "detectors", self.to_dict())

    @classmethod
    def load(cls, path) -> "DetectorSet":
        return cls.from_dict(bundle.read(path, "detectors"))


def build_graphs(dataset: LabeledDataset, features: np.ndarray, config: DetectorConfig) -> Tuple[List[Window], List[FlowGraph]]:
    windows = window_flows(dataset, config.window_size, config.stride)
    graphs = [build_flow_graph(dataset, w, features[w.start:w.end], config.self_loops, config.bucket_cap)
              for w in windows]
    return windows, graphs


def subset_graph(dataset: LabeledDataset, features: np.ndarray, idx: np.ndarray, config: DetectorConfig) -> FlowGraph:
    """Window graphs over the flows ``idx`` alone; ``flow_index`` refers back to ``dataset``."""
    idx = np.asarray(idx, dtype=np.int64)
    _, graphs = build_graphs(dataset.subset(idx), features[idx], config)
    g = union_graphs(graphs)
    return replace(g, flow_index=idx[g.flow_index])


def _fit_base_models(graph: FlowGraph, y: np.ndarray, config: DetectorConfig, seed: int):
    """GCN and forest on every node of ``graph``; ``y`` is indexed by node."""
    gcn_cfg = replace(config.gcn, seed=derive_seed(seed, 0))
    forest_cfg = replace(config.forest, seed=derive_seed(seed, 1))
    gcn, _ = train_gcn(graph, y, np.ones(y.shape[0], dtype=bool), gcn_cfg)
    forest = fit_forest(graph.node_features, y, forest_cfg)
    return gcn, forest


def train_stage(dataset: LabeledDataset, features: np.ndarray, stage: int, schema: FeatureSchema,
                config: DetectorConfig, groups=None, full_graph: Optional[FlowGraph] = None
                ) -> Tuple[StageDetector, OofRecord]:
    """Out-of-fold stacking for one stage, then refit both base models on all flows.

    Each fold's base models see only the other folds' flows, and the held-out
    flows are scored on window graphs built from the held-out flows alone,
    the way an unseen split is scored at detection time. ``groups`` (one id
    per flow, e.g. source IP) keeps each group inside a single fold.
    """
    y = binarize_for_stage(dataset, stage)
    if set(np.unique(y).tolist()) != {0, 1}:
        raise DegenerateLabels(f"stage {stage}: training split lacks positives or negatives", stage=stage)
    k = config.stacker.folds
    fold_seed = derive_seed(config.seed, stage, 999)
    if groups is None:
        folds = assign_folds(y.shape[0], k, fold_seed, y)
    else:
        folds = assign_group_folds(groups, y, k, fold_seed)
    oof = np.zeros((y.shape[0], 2))
    record = OofRecord(folds)
    for fold in range(k):
        mask = folds != fold
        fit_graph = subset_graph(dataset, features, np.flatnonzero(mask), config)
        held_graph = subset_graph(dataset, features, np.flatnonzero(~mask), config)
        gcn, forest = _fit_base_models(fit_graph, y[fit_graph.flow_index], config,
                                       derive_seed(config.seed, stage, fold))
        probs, _ = gcn_forward(gcn, held_graph)
        oof[held_graph.flow_index, 0] = probs[:, 1]
        oof[held_graph.flow_index, 1] = forest_predict_proba(forest, held_graph.node_features)[:, 1]
        record.train_masks.append(mask)
    record.check()
    meta = fit_stacked_detector(oof, y, replace(config.stacker, threshold=config.thresholds[stage]))
    if full_graph is None:
        full_graph = subset_graph(dataset, features, np.arange(len(dataset)), config)
    gcn, forest = _fit_base_models(full_graph, y[full_graph.flow_index], config, derive_seed(config.seed, stage, k))
    logger.info("stage %d: meta weights %s bias %.3f", stage, np.round(meta.weights, 3), meta.bias)
    return StageDetector(stage, gcn, forest, meta, schema), record


def train_all_stages(train: LabeledDataset, config: Optional[DetectorConfig] = None) -> DetectorSet:
    """Fit one detector per stage.

    Out-of-fold folds group flows by source IP. A stage whose training split
    is single-class is skipped and its reason recorded in ``DetectorSet.errors``.
    """
    config = config or DetectorConfig()
    features, schema = preprocess_features(train, fit=True)
    full_graph = subset_graph(train, features, np.arange(len(train)), config)
    groups = [f.src_ip for f in train.flows]
    detectors, errors, oofs = {}, {}, {}
    for stage in STAGES:
        try:
            detectors[stage], oofs[stage] = train_stage(train, features, stage, schema, config, groups, full_graph)
        except DegenerateLabels as exc:
            logger.warning("stage %d untrainable: %s", stage, exc)
            errors[stage] = str(exc)
    return DetectorSet(detectors, schema, config, errors, oofs)


@dataclass(frozen=True)
class Alert:
    stage: int
    flow_index: int
    timestamp: float
    src_ip: str
    dst_ip: str
    probability: float
    window_id: int

    FIELDS = ("stage", "flow_index", "timestamp", "src_ip", "dst_ip", "probability", "window_id")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class StageScores:
    """Per-flow scores for one stage over a whole dataset (NaN where not scored)."""

    gcn: np.ndarray
    forest: np.ndarray
    stacked: np.ndarray
    flagged: np.ndarray


@dataclass
class Detection:
    alerts: List[Alert]
    embeddings: Dict[int, List[Embedding]]
    scores: Dict[int, StageScores]


def _score_stage(det: StageDetector, graph: FlowGraph):
    probs, emb = gcn_forward(det.gcn, graph)
    g = probs[:, 1]
    f = forest_predict_proba(det.forest, graph.node_features)[:, 1]
    p = det.meta.predict_proba(np.column_stack([g, f]))
    return g, f, p, emb


def detect_window(detectors: DetectorSet, dataset: LabeledDataset, window: Window,
                  features: Optional[np.ndarray] = None):
    """Score every flow of ``window`` with every fitted detector.

    Returns ``(alerts, embeddings, scores)``; alerts are ordered by
    (flow index, stage) and embeddings are kept for stage-1/2 alerts only.
    """
    if features is None:
        if dataset.schema.columns != detectors.schema.columns:
            raise SchemaMismatch("dataset columns differ from the detectors' schema")
        full, _ = preprocess_features(dataset, fit=False, schema=detectors.schema)
        features = full[window.start:window.end]
    cfg = detectors.config
    graph = build_flow_graph(dataset, window, features, cfg.self_loops, cfg.bucket_cap)
    graph = replace(graph, window_ids=np.full(graph.node_count, window.window_id, dtype=np.int64))
    alerts, embeddings, scores = [], {s: [] for s in EMBEDDING_STAGES}, {}
    for stage, det in sorted(detectors.detectors.items()):
        g, f, p, emb = _score_stage(det, graph)
        flagged = p >= det.meta.threshold
        scores[stage] = (g, f, p, flagged)
        if stage in EMBEDDING_STAGES:
            for local in np.flatnonzero(flagged):
                embeddings[stage].append(Embedding(emb[local].copy(), window.start + int(local), window.window_id))
    for local in range(len(window)):
        for stage in sorted(scores):
            g, f, p, flagged = scores[stage]
            if flagged[local]:
                i = window.start + local
                flow = dataset.flows[i]
                alerts.append(Alert(stage, i, flow.timestamp, flow.src_ip, flow.dst_ip, float(p[local]), window.window_id))
    return alerts, embeddings, scores


def detect(detectors: DetectorSet, dataset: LabeledDataset) -> Detection:
    """Run detection over every window of ``dataset``.

    With overlapping windows a flow keeps the scores of the last window
    containing it.
    """
    if dataset.schema.columns != detectors.schema.columns:
        raise SchemaMismatch("dataset columns differ from the detectors' schema")
    features, _ = preprocess_features(dataset, fit=False, schema=detectors.schema)
    cfg = detectors.config
    n = len(dataset)
    scores = {s: StageScores(*(np.full(n, np.nan) for _ in range(3)), np.zeros(n, dtype=bool))
              for s in detectors.detectors}
    owner = np.full(n, -1, dtype=np.int64)
    per_window = []
    for w in window_flows(dataset, cfg.window_size, cfg.stride):
        alerts, embs, sc = detect_window(detectors, dataset, w, features[w.start:w.end])
        owner[w.start:w.end] = w.window_id
        per_window.append((w, alerts, embs))
        for s, (g, f, p, flagged) in sc.items():
            sl = slice(w.start, w.end)
            scores[s].gcn[sl], scores[s].forest[sl], scores[s].stacked[sl], scores[s].flagged[sl] = g, f, p, flagged
    all_alerts, all_embs = [], {s: [] for s in EMBEDDING_STAGES}
    for w, alerts, embs in per_window:
        all_alerts.extend(a for a in alerts if owner[a.flow_index] == w.window_id)
        for s in EMBEDDING_STAGES:
            all_embs[s].extend(e for e in embs[s] if owner[e.node_index] == w.window_id)
    all_alerts.sort(key=lambda a: (a.flow_index, a.stage))
    return Detection(all_alerts, all_embs, scores)


ALERTS_VERSION_LINE = f"stageids-alerts v{bundle.FORMAT_VERSION}"


def write_alerts(alerts: List[Alert], path) -> None:
    """Version line, then one JSON object per alert."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(ALERTS_VERSION_LINE + "\n")
        for a in alerts:
            fh.write(json.dumps(a.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def read_alerts(path) -> List[Alert]:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip()
        if head != ALERTS_VERSION_LINE:
            raise BundleFormatError(f"{path}: expected {ALERTS_VERSION_LINE!r}, found {head!r}")
        try:
            return [Alert(**json.loads(line)) for line in fh if line.strip()]
        except (json.JSONDecodeError, TypeError) as exc:
            raise BundleFormatError(f"{path}: bad alert record ({exc})") from None

"""IP-disjoint splitting, detection metrics, forest benchmark and stage timelines."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import bundle
from .detector import STAGES, Detection, DetectorConfig, DetectorSet, detect, train_all_stages
from .errors import DegenerateSplit, LengthMismatch
from .flow_model import LabeledDataset, StageLabel, binarize_for_stage

logger = logging.getLogger(__name__)

# Full-scale ToN-IoT reference figures; annotations only, never asserted at desk scale.
REFERENCE_FULL_SCALE = {
    "detector": {1: dict(f1=0.995, precision=0.993, recall=0.998, fpr=0.007),
                 2: dict(f1=0.930, precision=0.88, recall=0.980, fpr=0.134),
                 3: dict(f1=0.893, precision=0.824, recall=0.973, fpr=0.207)},
    "benchmark": {1: dict(f1=0.976, precision=0.978, recall=0.974, fpr=0.021),
                  2: dict(f1=0.905, precision=0.882, recall=0.930, fpr=0.123),
                  3: dict(f1=0.864, precision=0.808, recall=0.929, fpr=0.220)},
}


@dataclass
class SplitReport:
    train_ips: List[str]
    test_ips: List[str]
    dropped_flows: int = 0
    warnings: List[str] = field(default_factory=list)


def _partition_key(flow, key: str) -> Tuple[str, ...]:
    if key == "src":
        return (flow.src_ip,)
    if key == "dst":
        return (flow.dst_ip,)
    return (flow.src_ip, flow.dst_ip)


def ip_split(dataset: LabeledDataset, test_fraction: float = 0.3, seed: int = 0,
             key: str = "src") -> Tuple[LabeledDataset, LabeledDataset, SplitReport]:
    """Randomly partition partitioning IPs and route each flow with its IP.

    ``key="src"`` (default) partitions source IPs. ``"dst"`` partitions
    destinations. ``"both"`` partitions every IP and drops flows whose two
    endpoints land on different sides.
    """
    if key not in ("src", "dst", "both"):
        raise ValueError(f"key must be src, dst or both, got {key!r}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    ips = sorted({ip for f in dataset.flows for ip in _partition_key(f, key)})
    if len(ips) < 2:
        raise DegenerateSplit(f"need >= 2 distinct partitioning IPs, found {len(ips)}")
    rng = np.random.default_rng(seed)
    n_test = min(len(ips) - 1, max(1, int(round(test_fraction * len(ips)))))
    test_set = {ips[i] for i in rng.permutation(len(ips))[:n_test]}
    train_idx, test_idx, dropped = [], [], 0
    for i, f in enumerate(dataset.flows):
        sides = {ip in test_set for ip in _partition_key(f, key)}
        if len(sides) > 1:
            dropped += 1
        elif sides.pop():
            test_idx.append(i)
        else:
            train_idx.append(i)
    if not train_idx or not test_idx:
        raise DegenerateSplit("IP split left one side without flows")
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    report = SplitReport(sorted(set(ips) - test_set), sorted(test_set), dropped)
    for stage in STAGES:
        for name, part in (("train", train), ("test", test)):
            if len(set(binarize_for_stage(part, stage).tolist())) < 2:
                report.warnings.append(f"stage {stage}: {name} split is single-class")
    if report.warnings:
        logger.warning("degenerate split: %s", "; ".join(report.warnings))
    return train, test, report


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def transposed(self) -> "ConfusionMatrix":
        """Same counts with the positive and negative classes swapped."""
        return ConfusionMatrix(self.tn, self.fn, self.tp, self.fp)


@dataclass(frozen=True)
class Metrics:
    confusion: ConfusionMatrix
    precision: float
    recall: float
    f1: float
    fpr: float
    zero_denominators: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        c = self.confusion
        return {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "fpr": self.fpr,
                "zero_denominators": list(self.zero_denominators)}


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    """Point metrics; a zero denominator yields 0 and is listed in ``zero_denominators``."""
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    precision = ratio(cm.tp, cm.tp + cm.fp, "precision")
    recall = ratio(cm.tp, cm.tp + cm.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    fpr = ratio(cm.fp, cm.fp + cm.tn, "fpr")
    return Metrics(cm, precision, recall, f1, fpr, tuple(flags))


def compute_metrics(predictions: Sequence[bool], labels: Sequence[bool]) -> Metrics:
    p = np.asarray(predictions, dtype=bool)
    y = np.asarray(labels, dtype=bool)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.shape[0]} predictions vs {y.shape[0]} labels")
    if p.size == 0:
        raise LengthMismatch("need at least one prediction")
    cm = ConfusionMatrix(int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)), int(np.sum(~p & y)))
    return metrics_from_confusion(cm)


def config_fingerprint(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class BenchmarkReport:
    """Per stage: the stacked detector, the standalone forest benchmark and the GCN alone."""

    rows: Dict[int, Dict[str, Metrics]]
    fingerprint: str
    errors: Dict[int, str] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def table(self) -> List[Tuple[str, Metrics]]:
        """Report rows: detector then benchmark, per stage."""
        out = []
        for stage in sorted(self.rows):
            out.append((f"Stage {stage} Detector", self.rows[stage]["detector"]))
            out.append((f"Benchmark Model {stage}", self.rows[stage]["benchmark"]))
        return out

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "stages": {str(s): {k: m.to_dict() for k, m in sorted(r.items())} for s, r in sorted(self.rows.items())},
            "errors": {str(s): e for s, e in sorted(self.errors.items())},
            "notes": list(self.notes),
            "reference_full_scale": {k: {str(s): v for s, v in d.items()} for k, d in REFERENCE_FULL_SCALE.items()},
        }

    def save(self, path) -> None:
        bundle.write(path, "metrics", self.to_dict())

    def render(self) -> str:
        lines = [f"{'Metrics':<22}{'F1-score':>10}{'Precision':>11}{'Recall':>9}{'FPR':>8}"]
        for name, m in self.table():
            lines.append(f"{name:<22}{m.f1:>10.3f}{m.precision:>11.3f}{m.recall:>9.3f}{m.fpr:>8.3f}")
        for stage, err in sorted(self.errors.items()):
            lines.append(f"Stage {stage}: not trained ({err})")
        return "\n".join(lines)


def evaluate_detection(detection: Detection, test: LabeledDataset) -> Dict[int, Dict[str, Metrics]]:
    rows = {}
    for stage, sc in sorted(detection.scores.items()):
        y = binarize_for_stage(test, stage).astype(bool)
        rows[stage] = {
            "detector": compute_metrics(sc.flagged, y),
            "benchmark": compute_metrics(sc.forest >= 0.5, y),
            "gcn": compute_metrics(sc.gcn >= 0.5, y),
        }
    return rows


def run_benchmark(train: LabeledDataset, test: LabeledDataset, config: Optional[DetectorConfig] = None,
                  detectors: Optional[DetectorSet] = None, extra_fingerprint: Optional[dict] = None):
    """Train (or reuse) the stacked detectors and compare against the forest benchmark.

    The benchmark is a standalone forest with the detector forest's data,
    hyperparameters and seed, i.e. the detector's own context-agnostic base
    model, scored without the graph branch or the meta-model.

    Returns ``(report, detectors, detection)``.
    """
    config = config or DetectorConfig()
    detectors = detectors or train_all_stages(train, config)
    detection = detect(detectors, test)
    fp = config_fingerprint({"detector": detectors.config.to_dict(), **(extra_fingerprint or {})})
    report = BenchmarkReport(evaluate_detection(detection, test), fp, dict(detectors.errors))
    report.notes.append("benchmark forest hyperparameters equal the detector forest's")
    return report, detectors, detection


TIMELINE_HEADER = ["view", "ip", "timestamp", "stage", "peer_ip", "attack_type", "source"]


def timeline_rows(dataset: LabeledDataset, alerts: Optional[Iterable] = None) -> List[list]:
    """Per-target and per-attacker (ip, timestamp, stage) rows.

    Ground-truth rows come from the dataset labels; alert rows (if given)
    carry ``source=alert``.
    """
    rows = []
    for f, label in zip(dataset.flows, dataset.stage_labels):
        if label is StageLabel.NORMAL:
            continue
        rows.append(["target", f.dst_ip, repr(f.timestamp), int(label), f.src_ip, f.attack_type, "truth"])
        rows.append(["attacker", f.src_ip, repr(f.timestamp), int(label), f.dst_ip, f.attack_type, "truth"])
    for a in alerts or ():
        if not 0 <= a.flow_index < len(dataset) or dataset.flows[a.flow_index].timestamp != a.timestamp:
            raise ValueError(f"alert for flow {a.flow_index} does not match this dataset")
        atype = dataset.flows[a.flow_index].attack_type
        rows.append(["target", a.dst_ip, repr(a.timestamp), a.stage, a.src_ip, atype, "alert"])
        rows.append(["attacker", a.src_ip, repr(a.timestamp), a.stage, a.dst_ip, atype, "alert"])
    rows.sort(key=lambda r: (r[0], r[1], float(r[2]), r[3], r[6]))
    return rows


def write_timeline(rows: List[list], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# stageids-timeline v{bundle.FORMAT_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMELINE_HEADER)
        w.writerows(rows)

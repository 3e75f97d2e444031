"""Flow records, feature schema, kill-chain stage mapping and preprocessing."""

from __future__ import annotations

import configparser
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyDataset, InvalidConfig, MissingColumn, SchemaMismatch, UnmappedAttackType

logger = logging.getLogger(__name__)

TS_COL = "ts"
SRC_IP_COL = "src_ip"
SRC_PORT_COL = "src_port"
DST_IP_COL = "dst_ip"
DST_PORT_COL = "dst_port"
TYPE_COL = "type"
PROTO_COL = "proto"
REQUIRED_COLUMNS = (TS_COL, SRC_IP_COL, SRC_PORT_COL, DST_IP_COL, DST_PORT_COL, TYPE_COL)

NORMAL_TOKEN = "normal"
UNKNOWN_TOKEN = "<unk>"


class StageLabel(IntEnum):
    NORMAL = 0
    STAGE1 = 1
    STAGE2 = 2
    STAGE3 = 3


@dataclass(frozen=True)
class FlowRecord:
    timestamp: float
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    protocol: str
    numeric_features: Tuple[float, ...]
    categorical_features: Tuple[str, ...]
    attack_type: str

    def __post_init__(self):
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 65535:
                raise ValueError(f"port out of range: {port}")
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")


@dataclass
class FeatureSchema:
    """Column layout plus, once fitted, the encodings and scaling statistics.

    ``categorical_encodings`` maps each categorical column to ``token -> index``
    over the tokens seen in training; index ``len(mapping)`` is the reserved
    slot for unseen tokens.
    """

    numeric_names: List[str]
    categorical_names: List[str]
    dropped_names: List[str] = field(default_factory=lambda: ["src_ip_bytes"])
    categorical_encodings: Dict[str, Dict[str, int]] = field(default_factory=dict)
    numeric_means: Optional[np.ndarray] = None
    numeric_stds: Optional[np.ndarray] = None
    log_scale: List[str] = field(default_factory=list)

    def __post_init__(self):
        dropped = set(self.dropped_names)
        self.numeric_names = [n for n in self.numeric_names if n not in dropped]
        self.categorical_names = [n for n in self.categorical_names if n not in dropped]
        unknown = set(self.log_scale) - set(self.numeric_names) - dropped
        if unknown:
            raise InvalidConfig(f"log_scale names non-numeric column(s): {sorted(unknown)}")
        self.log_scale = [n for n in self.log_scale if n in self.numeric_names]

    @property
    def fitted(self) -> bool:
        return self.numeric_means is not None

    @property
    def columns(self) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
        return tuple(self.numeric_names), tuple(self.categorical_names)

    @property
    def feature_dim(self) -> int:
        if not self.fitted:
            raise SchemaMismatch("schema has not been fitted")
        n_cat = sum(len(self.categorical_encodings[c]) + 1 for c in self.categorical_names)
        return len(self.numeric_names) + n_cat

    def unfitted(self) -> "FeatureSchema":
        return FeatureSchema(list(self.numeric_names), list(self.categorical_names), list(self.dropped_names),
                             log_scale=list(self.log_scale))

    def to_dict(self) -> dict:
        return {
            "numeric_names": list(self.numeric_names),
            "categorical_names": list(self.categorical_names),
            "dropped_names": list(self.dropped_names),
            "log_scale": list(self.log_scale),
            "categorical_encodings": {k: dict(sorted(v.items(), key=lambda kv: kv[1]))
                                      for k, v in self.categorical_encodings.items()},
            "numeric_means": None if self.numeric_means is None else self.numeric_means.tolist(),
            "numeric_stds": None if self.numeric_stds is None else self.numeric_stds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        schema = cls(d["numeric_names"], d["categorical_names"], d["dropped_names"], log_scale=d.get("log_scale", []))
        schema.categorical_encodings = {k: {t: int(i) for t, i in v.items()}
                                        for k, v in d["categorical_encodings"].items()}
        if d.get("numeric_means") is not None:
            schema.numeric_means = np.asarray(d["numeric_means"], dtype=np.float64)
            schema.numeric_stds = np.asarray(d["numeric_stds"], dtype=np.float64)
        return schema


def _split_list(value: str) -> List[str]:
    return [v.strip() for v in value.replace("\n", ",").split(",") if v.strip()]


def load_schema(path: Optional[Path] = None) -> FeatureSchema:
    """Read a schema file; ``None`` loads the shipped ToN-IoT schema.

    Format (INI)::

        [schema]
        numeric = duration, src_bytes, ...
        categorical = proto, service, conn_state
        dropped = src_ip_bytes
        log_scale = duration, src_bytes, ...   (optional: log1p before scaling)
    """
    parser = configparser.ConfigParser()
    if path is None:
        parser.read_string(resources.files("stageids.data").joinpath("ton_iot_schema.cfg").read_text())
    else:
        if not Path(path).exists():
            raise InvalidConfig(f"schema file not found: {path}")
        parser.read(path)
    if "schema" not in parser:
        raise InvalidConfig("schema file needs a [schema] section")
    sec = parser["schema"]
    unknown = set(sec) - {"numeric", "categorical", "dropped", "log_scale"}
    if unknown:
        raise InvalidConfig(f"unknown schema key(s): {sorted(unknown)}")
    return FeatureSchema(
        _split_list(sec.get("numeric", "")),
        _split_list(sec.get("categorical", "")),
        _split_list(sec.get("dropped", "src_ip_bytes")),
        log_scale=_split_list(sec.get("log_scale", "")),
    )


class StageMapping:
    """Attack-type token to stage lookup. ``normal`` always maps to NORMAL."""

    def __init__(self, table: Dict[str, int | StageLabel]):
        self.table: Dict[str, StageLabel] = {}
        for token, stage in table.items():
            label = StageLabel(int(stage))
            if label is StageLabel.NORMAL:
                raise InvalidConfig(f"attack type {token!r} cannot map to Normal")
            self.table[token.strip().lower()] = label

    def __contains__(self, token: str) -> bool:
        return token == NORMAL_TOKEN or token in self.table

    def tokens_for(self, stage: int) -> List[str]:
        return sorted(t for t, s in self.table.items() if s == stage)

    def fingerprint(self) -> str:
        body = ";".join(f"{k}={int(v)}" for k, v in sorted(self.table.items()))
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "StageMapping":
        """Load ``[stage_mapping]`` from an INI file, or the shipped default."""
        parser = configparser.ConfigParser()
        if path is None:
            parser.read_string(resources.files("stageids.data").joinpath("stage_mapping.cfg").read_text())
        else:
            if not Path(path).exists():
                raise InvalidConfig(f"stage mapping file not found: {path}")
            parser.read(path)
        if "stage_mapping" not in parser:
            raise InvalidConfig("stage mapping file needs a [stage_mapping] section")
        table = {}
        for token, value in parser["stage_mapping"].items():
            try:
                table[token] = int(value)
            except ValueError:
                raise InvalidConfig(f"stage for {token!r} must be 1, 2 or 3, got {value!r}") from None
            if table[token] not in (1, 2, 3):
                raise InvalidConfig(f"stage for {token!r} must be 1, 2 or 3, got {value!r}")
        return cls(table)


def map_attack_to_stage(attack_type: str, mapping: StageMapping) -> StageLabel:
    token = attack_type.strip().lower()
    if token == NORMAL_TOKEN:
        return StageLabel.NORMAL
    try:
        return mapping.table[token]
    except KeyError:
        raise UnmappedAttackType(token) from None


@dataclass
class LabeledDataset:
    flows: List[FlowRecord]
    schema: FeatureSchema
    stage_labels: List[StageLabel]
    malformed_rows: int = 0

    def __post_init__(self):
        if len(self.flows) != len(self.stage_labels):
            raise ValueError("flows and stage_labels differ in length")

    def __len__(self):
        return len(self.flows)

    @property
    def timestamps(self) -> np.ndarray:
        return np.fromiter((f.timestamp for f in self.flows), dtype=np.float64, count=len(self.flows))

    @property
    def labels_array(self) -> np.ndarray:
        return np.asarray([int(s) for s in self.stage_labels], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = sorted(int(i) for i in indices)
        return LabeledDataset([self.flows[i] for i in idx], self.schema,
                              [self.stage_labels[i] for i in idx])


def _sorted_dataset(flows, schema, labels, malformed=0) -> LabeledDataset:
    order = sorted(range(len(flows)), key=lambda i: flows[i].timestamp)
    return LabeledDataset([flows[i] for i in order], schema, [labels[i] for i in order], malformed)


def make_dataset(flows: Sequence[FlowRecord], schema: FeatureSchema, mapping: StageMapping) -> LabeledDataset:
    labels = [map_attack_to_stage(f.attack_type, mapping) for f in flows]
    return _sorted_dataset(list(flows), schema, labels)


def parse_flows(path, schema: FeatureSchema, mapping: Optional[StageMapping] = None) -> LabeledDataset:
    """Parse a flow CSV into a timestamp-sorted dataset.

    Lines starting with ``#`` (such as the version line ``write_flows``
    emits) are skipped.

    Rows whose endpoint or numeric fields fail to parse are dropped and
    counted in ``malformed_rows``. Extra columns are ignored.
    """
    mapping = mapping or StageMapping.load()
    schema = schema.unfitted()
    flows: List[FlowRecord] = []
    labels: List[StageLabel] = []
    malformed = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path}: no header row") from None
        col = {name: i for i, name in enumerate(header)}
        for name in (*REQUIRED_COLUMNS, *schema.numeric_names, *schema.categorical_names):
            if name not in col:
                raise MissingColumn(name)
        num_idx = [col[n] for n in schema.numeric_names]
        cat_idx = [col[n] for n in schema.categorical_names]
        proto_idx = col.get(PROTO_COL)
        for row in reader:
            if not row:
                continue
            try:
                attack = row[col[TYPE_COL]].strip().lower()
                flow = FlowRecord(
                    timestamp=float(row[col[TS_COL]]),
                    src_ip=row[col[SRC_IP_COL]].strip(),
                    src_port=int(float(row[col[SRC_PORT_COL]])),
                    dst_ip=row[col[DST_IP_COL]].strip(),
                    dst_port=int(float(row[col[DST_PORT_COL]])),
                    protocol=row[proto_idx].strip() if proto_idx is not None else "-",
                    numeric_features=tuple(float(row[i]) for i in num_idx),
                    categorical_features=tuple(row[i].strip() for i in cat_idx),
                    attack_type=attack,
                )
            except (ValueError, IndexError):
                malformed += 1
                continue
            if not all(math.isfinite(v) for v in flow.numeric_features):
                malformed += 1
                continue
            labels.append(map_attack_to_stage(attack, mapping))
            flows.append(flow)
    if malformed:
        logger.warning("%s: dropped %d malformed row(s)", path, malformed)
    if not flows:
        raise EmptyDataset(f"{path}: zero valid rows")
    return _sorted_dataset(flows, schema, labels, malformed)


FLOWS_VERSION_LINE = "# stageids-flows v1"


def write_flows(dataset: LabeledDataset, path) -> None:
    """Write a dataset in the CSV layout ``parse_flows`` reads."""
    schema = dataset.schema
    proto_in_cats = PROTO_COL in schema.categorical_names
    header = [TS_COL, SRC_IP_COL, SRC_PORT_COL, DST_IP_COL, DST_PORT_COL]
    if not proto_in_cats:
        header.append(PROTO_COL)
    header += [*schema.numeric_names, *schema.categorical_names, TYPE_COL]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(FLOWS_VERSION_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for f in dataset.flows:
            row = [repr(f.timestamp), f.src_ip, f.src_port, f.dst_ip, f.dst_port]
            if not proto_in_cats:
                row.append(f.protocol)
            row += [repr(v) for v in f.numeric_features]
            row += list(f.categorical_features)
            row.append(f.attack_type)
            w.writerow(row)


def binarize_for_stage(dataset: LabeledDataset, stage: int) -> np.ndarray:
    """1 for flows of ``stage``; Normal and every other stage become 0 ("Other")."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    return (dataset.labels_array == stage).astype(np.int64)


def preprocess_features(dataset: LabeledDataset, fit: bool,
                        schema: Optional[FeatureSchema] = None) -> Tuple[np.ndarray, FeatureSchema]:
    """Standardize numerics and one-hot categoricals.

    Columns listed in ``schema.log_scale`` pass through signed ``log1p``
    first.

    With ``fit=True`` statistics and encodings are learned from ``dataset``;
    otherwise the fitted ``schema`` is applied as-is.
    """
    if fit:
        base = schema if schema is not None else dataset.schema
        schema = base.unfitted()
    elif schema is None or not schema.fitted:
        raise SchemaMismatch("fit=False requires a fitted schema")
    if schema.columns != dataset.schema.columns:
        raise SchemaMismatch(f"schema columns {schema.columns} do not match dataset {dataset.schema.columns}")

    n = len(dataset)
    num = np.array([f.numeric_features for f in dataset.flows], dtype=np.float64).reshape(n, len(schema.numeric_names))
    for j, name in enumerate(schema.numeric_names):
        if name in schema.log_scale:
            num[:, j] = np.sign(num[:, j]) * np.log1p(np.abs(num[:, j]))
    if fit:
        means = num.mean(axis=0) if n else np.zeros(num.shape[1])
        stds = num.std(axis=0) if n else np.ones(num.shape[1])
        stds = np.where(stds > 1e-12, stds, 1.0)
        encodings = {}
        for j, name in enumerate(schema.categorical_names):
            tokens = sorted({f.categorical_features[j] for f in dataset.flows})
            encodings[name] = {t: i for i, t in enumerate(tokens)}
        schema = replace(schema, categorical_encodings=encodings, numeric_means=means, numeric_stds=stds)

    blocks = [(num - schema.numeric_means) / schema.numeric_stds]
    for j, name in enumerate(schema.categorical_names):
        enc = schema.categorical_encodings[name]
        unk = len(enc)
        idx = np.fromiter((enc.get(f.categorical_features[j], unk) for f in dataset.flows), dtype=np.int64, count=n)
        onehot = np.zeros((n, unk + 1))
        onehot[np.arange(n), idx] = 1.0
        blocks.append(onehot)
    return np.hstack(blocks), schema


def restrict_to_schema(dataset: LabeledDataset, schema: FeatureSchema) -> LabeledDataset:
    """Project flows onto ``schema``'s columns (dropping e.g. ``src_ip_bytes``)."""
    src_num, src_cat = dataset.schema.numeric_names, dataset.schema.categorical_names
    target = schema.unfitted()
    try:
        ni = [src_num.index(n) for n in target.numeric_names]
        ci = [src_cat.index(n) for n in target.categorical_names]
    except ValueError as exc:
        raise SchemaMismatch(f"dataset lacks a schema column: {exc}") from None
    flows = [replace(f, numeric_features=tuple(f.numeric_features[i] for i in ni),
                     categorical_features=tuple(f.categorical_features[i] for i in ci))
             for f in dataset.flows]
    return LabeledDataset(flows, target, list(dataset.stage_labels), dataset.malformed_rows)

"""Pipeline configuration: one INI file, one master seed.

Sections and keys (every key optional)::

    [run]       seed, data, out, mapping, schema, test_fraction, split_key
    [seeds]     scenario, split, detector, ae_scenario, ae, ae_split
    [scenario]  generator keys (see ``scenario.scenario_from_section``)
    [ae_scenario]  same keys; a separate corpus for the AE predictor
    [detector]  window_size, stride, self_loops, bucket_cap, threshold_1..3
    [gcn]       hidden_dim, layers, epochs, step_size
    [forest]    n_trees, max_depth, min_samples_leaf, max_features
    [stacker]   folds, epochs, step, l2
    [ae]        T, horizon, hidden_dim, epochs, step_size, clip_norm, threshold,
                val_fraction, patience, min_delta, test_fraction

Unknown sections and keys are rejected. Per-module seeds not given under
``[seeds]`` are derived from the master seed as
``SeedSequence([seed, code]).generate_state(1)[0]`` with the codes in
``SEED_CODES``. ``write_effective`` echoes every value, derived seeds
included, so the echo reruns the same experiment.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, Optional

from .ae import AeConfig
from .detector import DetectorConfig, derive_seed
from .errors import InvalidConfig
from .forest import ForestConfig
from .gcn import GcnConfig
from .scenario import ScenarioConfig, scenario_from_section
from .stacker import StackerConfig

CONFIG_VERSION_LINE = "# stageids-config v1"

SEED_CODES = {"scenario": 1, "split": 2, "detector": 3, "ae_scenario": 4, "ae": 5, "ae_split": 6}

SCENARIO_KEYS = {"attackers", "target_ips", "benign_ips", "benign_rate", "duration_s", "stage_patterns",
                 "stage_repetition", "ae_follow_prob", "ip_churn", "overlap", "n_targets", "n_benign",
                 "n_attackers", "ips_per_attacker"}


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt(conv: Callable) -> Callable:
    def parse(v: str):
        return None if v.strip().lower() in ("", "none") else conv(v)
    return parse


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_GCN = {"hidden_dim": int, "layers": int, "epochs": int, "step_size": float}
_FOREST = {"n_trees": int, "max_depth": int, "min_samples_leaf": int, "max_features": _opt(int)}
_STACKER = {"folds": int, "epochs": int, "step": float, "l2": float}
_DETECTOR = {"window_size": int, "stride": _opt(int), "self_loops": _bool, "bucket_cap": int,
             "threshold_1": float, "threshold_2": float, "threshold_3": float}
_AE = {"T": int, "horizon": _opt(float), "hidden_dim": int, "epochs": int, "step_size": float, "clip_norm": float,
       "threshold": float, "val_fraction": float, "patience": int, "min_delta": float, "test_fraction": float}
_RUN = {"seed": int, "data": _opt(str), "out": str, "mapping": _opt(str), "schema": _opt(str),
        "test_fraction": float, "split_key": str}


@dataclass
class PipelineConfig:
    seed: int = 0
    data: Optional[str] = None
    out: str = "stageids-run"
    mapping: Optional[str] = None
    schema: Optional[str] = None
    test_fraction: float = 0.3
    split_key: str = "src"
    seed_overrides: Dict[str, int] = field(default_factory=dict)
    scenario: Dict[str, str] = field(default_factory=dict)
    ae_scenario: Optional[Dict[str, str]] = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    ae: AeConfig = field(default_factory=AeConfig)
    ae_test_fraction: float = 0.3

    def seed_for(self, name: str) -> int:
        if name not in SEED_CODES:
            raise KeyError(name)
        if name in self.seed_overrides:
            return self.seed_overrides[name]
        return derive_seed(self.seed, SEED_CODES[name])

    @property
    def seeds(self) -> Dict[str, int]:
        return {name: self.seed_for(name) for name in SEED_CODES}

    def scenario_config(self) -> ScenarioConfig:
        return scenario_from_section(self.scenario, self.seed_for("scenario"))

    def ae_scenario_config(self) -> Optional[ScenarioConfig]:
        if self.ae_scenario is None:
            return None
        return scenario_from_section(self.ae_scenario, self.seed_for("ae_scenario"))

    def detector_config(self) -> DetectorConfig:
        return replace(self.detector, seed=self.seed_for("detector"))

    def ae_config(self) -> AeConfig:
        return replace(self.ae, seed=self.seed_for("ae"))

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same config under another master seed (explicit seed overrides are dropped)."""
        return replace(self, seed=seed, seed_overrides={})

    def validate(self) -> None:
        if not 0.0 < self.test_fraction < 1.0 or not 0.0 < self.ae_test_fraction < 1.0:
            raise InvalidConfig("test fractions must lie in (0, 1)")
        if self.split_key not in ("src", "dst", "both"):
            raise InvalidConfig(f"split_key must be src, dst or both, got {self.split_key!r}")
        for stage, t in self.detector.thresholds.items():
            if not 0.0 < t < 1.0:
                raise InvalidConfig(f"threshold_{stage} must lie in (0, 1)")
        if self.detector.window_size < 1:
            raise InvalidConfig("window_size must be >= 1")
        self.scenario_config()
        self.ae_scenario_config()


def _parse_section(section, table: Dict[str, Callable], name: str) -> dict:
    out = {}
    for key, raw in section.items():
        if key not in table:
            raise InvalidConfig(f"unknown key '{key}' in [{name}]")
        try:
            out[key] = table[key](raw)
        except ValueError as exc:
            raise InvalidConfig(f"[{name}] {key}: {exc}") from None
    return out


def _scenario_section(section, name: str) -> Dict[str, str]:
    unknown = set(section) - SCENARIO_KEYS
    if unknown:
        raise InvalidConfig(f"unknown key '{sorted(unknown)[0]}' in [{name}]")
    return {k: v for k, v in section.items()}


def parse_config(text: str, source: str = "<string>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    # keys are case-sensitive ("T")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise InvalidConfig(f"{source}: {exc}") from None
    known = {"run", "seeds", "scenario", "ae_scenario", "detector", "gcn", "forest", "stacker", "ae"}
    for name in parser.sections():
        if name not in known:
            raise InvalidConfig(f"unknown section [{name}]")
    cfg = PipelineConfig()
    if "run" in parser:
        for k, v in _parse_section(parser["run"], _RUN, "run").items():
            setattr(cfg, k, v)
    if "seeds" in parser:
        cfg.seed_overrides = _parse_section(parser["seeds"], {k: int for k in SEED_CODES}, "seeds")
    if "scenario" in parser:
        cfg.scenario = _scenario_section(parser["scenario"], "scenario")
    if "ae_scenario" in parser:
        cfg.ae_scenario = _scenario_section(parser["ae_scenario"], "ae_scenario")
    det = cfg.detector
    if "gcn" in parser:
        det.gcn = replace(det.gcn, **_parse_section(parser["gcn"], _GCN, "gcn"))
    if "forest" in parser:
        det.forest = replace(det.forest, **_parse_section(parser["forest"], _FOREST, "forest"))
    if "stacker" in parser:
        det.stacker = replace(det.stacker, **_parse_section(parser["stacker"], _STACKER, "stacker"))
    if "detector" in parser:
        vals = _parse_section(parser["detector"], _DETECTOR, "detector")
        for stage in (1, 2, 3):
            if f"threshold_{stage}" in vals:
                det.thresholds[stage] = vals.pop(f"threshold_{stage}")
        cfg.detector = replace(det, **vals)
    if "ae" in parser:
        vals = _parse_section(parser["ae"], _AE, "ae")
        if "test_fraction" in vals:
            cfg.ae_test_fraction = vals.pop("test_fraction")
        cfg.ae = replace(cfg.ae, **vals)
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise InvalidConfig(f"config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), str(path))


def effective_text(cfg: PipelineConfig) -> str:
    """Every setting, derived seeds included, in the input format."""
    det = cfg.detector
    sections = {
        "run": {"seed": cfg.seed, "data": cfg.data, "out": cfg.out, "mapping": cfg.mapping, "schema": cfg.schema,
                "test_fraction": cfg.test_fraction, "split_key": cfg.split_key},
        "seeds": cfg.seeds,
        "scenario": dict(cfg.scenario),
    }
    if cfg.ae_scenario is not None:
        sections["ae_scenario"] = dict(cfg.ae_scenario)
    det_vals = {k: getattr(det, k) for k in ("window_size", "stride", "self_loops", "bucket_cap")}
    det_vals.update({f"threshold_{s}": det.thresholds[s] for s in sorted(det.thresholds)})
    sections["detector"] = det_vals
    for name, obj in (("gcn", det.gcn), ("forest", det.forest), ("stacker", det.stacker)):
        sections[name] = {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in ("seed", "threshold")}
    ae_vals = {f.name: getattr(cfg.ae, f.name) for f in fields(cfg.ae) if f.name != "seed"}
    ae_vals["test_fraction"] = cfg.ae_test_fraction
    sections["ae"] = ae_vals
    lines = [CONFIG_VERSION_LINE]
    for name, vals in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v if isinstance(v, str) and name.endswith('scenario') else _fmt(v)}"
                     for k, v in vals.items())
        lines.append("")
    return "\n".join(lines)


def write_effective(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(effective_text(cfg), encoding="utf-8")

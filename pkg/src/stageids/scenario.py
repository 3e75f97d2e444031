"""Seeded synthetic multi-stage attack traces in the ToN-IoT network CSV layout.

Benign traffic is a Poisson stream among benign and target hosts. Every
target receives one attack chain from one attacker: a sampled stage pattern
(reconnaissance bursts, then privilege-escalation bursts), optionally followed
by access-exploitation bursts; each flow of a burst draws its attack type
from the tokens mapped to the burst's stage and, with IP churn, its source
from the attacker's address pool. Whether the chain escalates is decided up
front; chains that will escalate carry "successful" privilege-escalation
traffic (completed connections, larger responses), which is what makes the
escalation predictable from stage-2 behaviour.
"""

from __future__ import annotations

import configparser
import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidConfig
from .flow_model import FeatureSchema, FlowRecord, LabeledDataset, StageMapping, make_dataset

NUMERIC_COLUMNS = ["duration", "src_bytes", "dst_bytes", "missed_bytes", "src_pkts",
                   "src_ip_bytes", "dst_pkts", "dst_ip_bytes"]
CATEGORICAL_COLUMNS = ["proto", "service", "conn_state"]

# log-space centres: duration s, src pkts, dst pkts, src bytes/pkt, dst bytes/pkt
_P = Tuple[float, float, float, float, float]

DEFAULT_PROFILES: Dict[str, dict] = {
    "normal_web": dict(centre=(0.0, 2.0, 2.4, 5.0, 6.4), proto={"tcp": 1.0},
                       service={"http": 0.6, "ssl": 0.4}, conn_state={"SF": 0.85, "S1": 0.1, "RSTO": 0.05},
                       port=(80, 443), weight=0.35),
    "normal_dns": dict(centre=(-3.0, 0.0, 0.0, 4.0, 4.7), proto={"udp": 1.0},
                       service={"dns": 1.0}, conn_state={"SF": 0.5, "SHR": 0.3, "S0": 0.2},
                       port=(53,), weight=0.25),
    "normal_iot": dict(centre=(-1.0, 1.0, 0.7, 4.6, 4.0), proto={"tcp": 0.7, "udp": 0.3},
                       service={"-": 0.8, "mqtt": 0.2}, conn_state={"SF": 0.6, "OTH": 0.3, "S3": 0.1},
                       port=(1883, 8883, 5683), weight=0.25),
    "normal_admin": dict(centre=(2.5, 3.5, 3.3, 4.4, 4.6), proto={"tcp": 1.0},
                         service={"ssh": 0.7, "ftp": 0.3}, conn_state={"SF": 0.9, "RSTO": 0.1},
                         port=(22, 21), weight=0.07),
    "normal_failed": dict(centre=(-2.8, 0.7, -2.0, 4.3, 0.0), proto={"tcp": 0.8, "udp": 0.2},
                          service={"-": 1.0}, conn_state={"S0": 0.4, "REJ": 0.4, "OTH": 0.2},
                          port=(22, 80, 443, 8080, 3389), weight=0.05),
    "scanning": dict(centre=(-5.0, 0.0, -2.5, 3.7, 0.0), proto={"tcp": 0.85, "udp": 0.15},
                     service={"-": 0.9, "http": 0.1}, conn_state={"S0": 0.35, "REJ": 0.4, "OTH": 0.15, "RSTR": 0.1},
                     port=None),
    "password": dict(centre=(0.8, 2.4, 2.2, 4.4, 4.3), proto={"tcp": 1.0},
                     service={"ssh": 0.5, "ftp": 0.2, "http": 0.3}, conn_state={"SF": 0.5, "RSTO": 0.3, "S3": 0.2},
                     port=(22, 21, 80)),
    "injection": dict(centre=(-0.2, 1.8, 1.6, 6.4, 5.6), proto={"tcp": 1.0},
                      service={"http": 1.0}, conn_state={"SF": 0.7, "RSTO": 0.2, "S3": 0.1},
                      port=(80, 8080)),
    "xss": dict(centre=(-0.4, 1.7, 1.5, 6.6, 5.9), proto={"tcp": 1.0},
                service={"http": 1.0}, conn_state={"SF": 0.7, "RSTO": 0.2, "S1": 0.1},
                port=(80, 8080)),
    "mitm": dict(centre=(1.5, 2.8, 0.0, 3.6, 3.0), proto={"udp": 0.6, "icmp": 0.4},
                 service={"-": 1.0}, conn_state={"OTH": 0.7, "S0": 0.3},
                 port=(0, 67)),
    "backdoor": dict(centre=(3.5, 2.2, 2.6, 4.0, 4.2), proto={"tcp": 1.0},
                     service={"-": 0.9, "ssl": 0.1}, conn_state={"SF": 0.4, "S1": 0.3, "OTH": 0.3},
                     port=(4444, 1337, 31337)),
    "ransomware": dict(centre=(2.0, 4.0, 4.3, 6.8, 6.9), proto={"tcp": 1.0},
                       service={"-": 0.6, "smb": 0.4}, conn_state={"SF": 0.8, "RSTO": 0.2},
                       port=(445, 139)),
    "dos": dict(centre=(-2.0, 3.2, -2.0, 6.0, 0.0), proto={"tcp": 0.6, "udp": 0.4},
                service={"-": 0.6, "http": 0.4}, conn_state={"S0": 0.6, "SH": 0.2, "OTH": 0.2},
                port=(80, 443, 53)),
    "ddos": dict(centre=(-2.5, 3.0, -2.0, 5.8, 0.0), proto={"tcp": 0.5, "udp": 0.5},
                 service={"-": 0.7, "dns": 0.3}, conn_state={"S0": 0.5, "OTH": 0.3, "SH": 0.2},
                 port=(80, 53)),
}

# stage-2 traffic of chains that will escalate vs. chains that stall
SUCCESS_SHIFT = dict(centre=(0.3, 0.2, 0.9, 0.0, 0.8), conn_state={"SF": 0.9, "S1": 0.1})
FAILURE_SHIFT = dict(centre=(-0.3, 0.0, -0.6, 0.0, -0.6), conn_state={"RSTO": 0.5, "REJ": 0.3, "S3": 0.2})


# none: one source IP per attacker; stage: a fresh pool IP per burst; flow: a pool IP per flow
CHURN_MODES = ("none", "stage", "flow")


@dataclass
class ScenarioConfig:
    seed: int = 0
    attackers: List[Tuple[str, ...]] = field(default_factory=lambda: [
        ("192.168.1.30", "192.168.1.31", "192.168.1.32", "192.168.1.33"),
        ("192.168.1.34", "192.168.1.35", "192.168.1.36", "192.168.1.37"),
        ("192.168.1.38", "192.168.1.39", "192.168.1.40", "192.168.1.41"),
    ])
    target_ips: List[str] = field(default_factory=lambda: [f"10.0.1.{i}" for i in range(1, 11)])
    benign_ips: List[str] = field(default_factory=lambda: [f"10.0.2.{i}" for i in range(1, 81)])
    benign_rate: float = 1.3
    duration_s: float = 3600.0
    stage_patterns: List[List[int]] = field(default_factory=lambda: [[1, 2, 3], [1, 1, 2, 3], [1, 2, 2, 3], [1, 2, 1, 2, 3]])
    stage_repetition: Tuple[int, int] = (20, 60)
    ae_follow_prob: float = 0.5
    ip_churn: str = "flow"
    overlap: float = 1.0
    feature_profiles: Dict[str, dict] = field(default_factory=lambda: copy.deepcopy(DEFAULT_PROFILES))

    def validate(self, mapping: StageMapping) -> None:
        roles = [set(ip for a in self.attackers for ip in a), set(self.target_ips), set(self.benign_ips)]
        if any(roles[i] & roles[j] for i in range(3) for j in range(i + 1, 3)):
            raise InvalidConfig("attacker, target and benign IP sets must be disjoint")
        if not self.attackers or not self.target_ips or not self.benign_ips:
            raise InvalidConfig("need at least one attacker, one target and one benign IP")
        if not 0.0 <= self.ae_follow_prob <= 1.0:
            raise InvalidConfig("ae_follow_prob must lie in [0, 1]")
        lo, hi = self.stage_repetition
        if not 1 <= lo <= hi:
            raise InvalidConfig("stage_repetition must satisfy 1 <= lo <= hi")
        if self.ip_churn not in CHURN_MODES:
            raise InvalidConfig(f"ip_churn must be one of {CHURN_MODES}, got {self.ip_churn!r}")
        if self.benign_rate < 0 or self.duration_s <= 0 or self.overlap <= 0:
            raise InvalidConfig("benign_rate >= 0, duration_s > 0 and overlap > 0 required")
        ok = False
        for p in self.stage_patterns:
            if any(s not in (1, 2, 3) for s in p):
                raise InvalidConfig(f"pattern {p} contains a stage outside 1..3")
            threes = [i for i, s in enumerate(p) if s == 3]
            twos = [i for i, s in enumerate(p) if s == 2]
            if threes and twos and min(threes) < max(twos):
                raise InvalidConfig(f"pattern {p}: stage 3 may only follow the last stage 2")
            if 1 in p and twos and p.index(1) < twos[0]:
                ok = True
        if not ok:
            raise InvalidConfig("need a pattern with stage 1 before stage 2")
        for stage in (1, 2, 3):
            for token in mapping.tokens_for(stage):
                if token not in self.feature_profiles:
                    raise InvalidConfig(f"no feature profile for attack type {token!r}")


@dataclass
class Burst:
    """``n_flows`` flows of one stage; each flow's source is drawn from ``src_ips``."""

    stage: int
    src_ips: Tuple[str, ...]
    n_flows: int


@dataclass
class Chain:
    attacker: int
    target_ip: str
    start: float
    bursts: List[Burst]
    escalates: bool

    @property
    def stages(self) -> List[int]:
        return [b.stage for b in self.bursts]


def _streams(seed: int):
    plan, benign, attack = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(plan), np.random.default_rng(benign), np.random.default_rng(attack)


def plan_chains(config: ScenarioConfig, mapping: Optional[StageMapping] = None) -> List[Chain]:
    """The attack chains a trace will contain; a pure function of the config."""
    mapping = mapping or StageMapping.load()
    rng, _, _ = _streams(config.seed)
    targets = list(config.target_ips)
    order = rng.permutation(len(targets))
    lo, hi = config.stage_repetition
    chains = []
    for k, t in enumerate(order):
        attacker = k % len(config.attackers)
        pool = config.attackers[attacker]
        pattern = list(config.stage_patterns[int(rng.integers(len(config.stage_patterns)))])
        escalates = bool(rng.random() < config.ae_follow_prob)
        if escalates and 3 not in pattern:
            pattern.append(3)
        if not escalates:
            pattern = [s for s in pattern if s != 3]
        bursts = []
        for stage in pattern:
            if config.ip_churn == "flow":
                srcs = tuple(pool)
            elif config.ip_churn == "stage":
                srcs = (pool[int(rng.integers(len(pool)))],)
            else:
                srcs = (pool[0],)
            bursts.append(Burst(stage, srcs, int(rng.integers(lo, hi + 1))))
        start = float(rng.uniform(0.05, 0.55) * config.duration_s)
        chains.append(Chain(attacker, targets[int(t)], start, bursts, escalates))
    return chains


def _pick(rng, dist: Dict[str, float]) -> str:
    keys = list(dist)
    p = np.asarray([dist[k] for k in keys], dtype=np.float64)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _features(rng, profile: dict, overlap: float, shift: Optional[dict] = None):
    centre = np.asarray(profile["centre"], dtype=np.float64)
    conn = profile["conn_state"]
    if shift is not None:
        centre = centre + np.asarray(shift["centre"])
        conn = shift["conn_state"]
    sd = 0.55 * overlap
    dur, sp, dp, sbpp, dbpp = rng.normal(centre, sd)
    duration = round(float(np.exp(dur)), 6)
    src_pkts = max(1, int(round(np.exp(sp))))
    dst_pkts = int(round(np.exp(dp))) if dp > -1.5 else 0
    src_bytes = int(round(src_pkts * np.exp(sbpp)))
    dst_bytes = int(round(dst_pkts * np.exp(dbpp)))
    missed = int(rng.integers(0, 200)) if rng.random() < 0.02 else 0
    numeric = (duration, float(src_bytes), float(dst_bytes), float(missed), float(src_pkts),
               float(src_bytes + 28 * src_pkts), float(dst_pkts), float(dst_bytes + 28 * dst_pkts))
    cats = (_pick(rng, profile["proto"]), _pick(rng, profile["service"]), _pick(rng, conn))
    return numeric, cats


def raw_schema() -> FeatureSchema:
    return FeatureSchema(list(NUMERIC_COLUMNS), list(CATEGORICAL_COLUMNS), dropped_names=[])


def generate_trace(config: ScenarioConfig, mapping: Optional[StageMapping] = None) -> LabeledDataset:
    """Generate a labelled trace; identical configs give identical traces."""
    mapping = mapping or StageMapping.load()
    config.validate(mapping)
    chains = plan_chains(config, mapping)
    _, brng, arng = _streams(config.seed)
    profiles = config.feature_profiles
    flows: List[FlowRecord] = []

    hosts = list(config.benign_ips) + list(config.target_ips)
    n_benign = int(brng.poisson(config.benign_rate * config.duration_s))
    times = np.sort(brng.uniform(0.0, config.duration_s, size=n_benign))
    normal_keys = [k for k in profiles if k.startswith("normal")]
    weights = np.asarray([profiles[k].get("weight", 1.0) for k in normal_keys])
    base_ts = 1_554_000_000.0
    for ts in times:
        i, j = brng.choice(len(hosts), size=2, replace=False)
        prof = profiles[normal_keys[int(brng.choice(len(normal_keys), p=weights / weights.sum()))]]
        numeric, cats = _features(brng, prof, config.overlap)
        flows.append(FlowRecord(round(base_ts + float(ts), 6), hosts[i], int(brng.integers(1024, 65536)),
                                hosts[j], int(prof["port"][int(brng.integers(len(prof["port"])))]),
                                cats[0], numeric, cats, "normal"))

    for chain in chains:
        t = chain.start
        for burst in chain.bursts:
            tokens = mapping.tokens_for(burst.stage)
            shift = None
            if burst.stage == 2:
                shift = SUCCESS_SHIFT if chain.escalates else FAILURE_SHIFT
            mean_gap = 0.2 if burst.stage == 1 else 2.0
            for _ in range(burst.n_flows):
                t += float(arng.exponential(mean_gap)) + 1e-3
                token = tokens[int(arng.integers(len(tokens)))]
                prof = profiles[token]
                numeric, cats = _features(arng, prof, config.overlap, shift)
                port = int(arng.integers(1, 10000)) if prof["port"] is None else int(prof["port"][int(arng.integers(len(prof["port"])))])
                src = burst.src_ips[int(arng.integers(len(burst.src_ips)))]
                flows.append(FlowRecord(round(base_ts + t, 6), src, int(arng.integers(1024, 65536)),
                                        chain.target_ip, port, cats[0], numeric, cats, token))
            t += float(arng.exponential(90.0)) + 1.0
    return make_dataset(flows, raw_schema(), mapping)


def chain_ground_truth(config: ScenarioConfig, trace: Optional[LabeledDataset] = None,
                       mapping: Optional[StageMapping] = None) -> Dict[str, int]:
    """Per target that received stages 1 and 2: 1 if its chain escalated to stage 3.

    Derived from the chain plan alone, independently of any flow-level
    labelling; ``trace`` is accepted for interface symmetry and is not read.
    """
    table = {}
    for chain in plan_chains(config, mapping):
        if 1 in chain.stages and 2 in chain.stages:
            table[chain.target_ip] = int(chain.escalates)
    return dict(sorted(table.items()))


_LIST_KEYS = {"target_ips", "benign_ips"}


def scenario_from_section(section: Dict[str, str], seed: Optional[int] = None) -> ScenarioConfig:
    """Build a config from ``[scenario]`` key/values (strings)."""
    cfg = ScenarioConfig()
    known = {"seed", "attackers", "target_ips", "benign_ips", "benign_rate", "duration_s", "stage_patterns",
             "stage_repetition", "ae_follow_prob", "ip_churn", "overlap", "n_targets", "n_benign", "n_attackers",
             "ips_per_attacker"}
    unknown = set(section) - known
    if unknown:
        raise InvalidConfig(f"unknown scenario key(s): {sorted(unknown)}")
    try:
        if "seed" in section:
            cfg.seed = int(section["seed"])
        if "n_attackers" in section or "ips_per_attacker" in section:
            na = int(section.get("n_attackers", len(cfg.attackers)))
            per = int(section.get("ips_per_attacker", len(cfg.attackers[0])))
            cfg.attackers = [tuple(f"192.168.{1 + (a * per + k) // 250}.{30 + (a * per + k) % 200}"
                                   for k in range(per)) for a in range(na)]
        if "attackers" in section:
            cfg.attackers = [tuple(g.split()) for g in section["attackers"].split(";") if g.strip()]
        if "n_targets" in section:
            cfg.target_ips = [f"10.0.{1 + i // 250}.{1 + i % 250}" for i in range(int(section["n_targets"]))]
        if "n_benign" in section:
            cfg.benign_ips = [f"10.1.{i // 250}.{1 + i % 250}" for i in range(int(section["n_benign"]))]
        for key in _LIST_KEYS & set(section):
            setattr(cfg, key, [v.strip() for v in section[key].split(",") if v.strip()])
        for key in ("benign_rate", "duration_s", "ae_follow_prob", "overlap"):
            if key in section:
                setattr(cfg, key, float(section[key]))
        if "ip_churn" in section:
            v = section["ip_churn"].strip().lower()
            cfg.ip_churn = {"true": "stage", "yes": "stage", "on": "stage", "false": "none", "no": "none",
                            "off": "none"}.get(v, v)
        if "stage_patterns" in section:
            cfg.stage_patterns = [[int(s) for s in p.split()] for p in section["stage_patterns"].split(";") if p.strip()]
        if "stage_repetition" in section:
            lo, hi = section["stage_repetition"].split()
            cfg.stage_repetition = (int(lo), int(hi))
    except ValueError as exc:
        raise InvalidConfig(f"bad scenario value: {exc}") from None
    if seed is not None:
        cfg.seed = seed
    return cfg


def load_scenario(path, seed: Optional[int] = None) -> ScenarioConfig:
    parser = configparser.ConfigParser()
    if not Path(path).exists():
        raise InvalidConfig(f"scenario config not found: {path}")
    parser.read(path)
    if "scenario" not in parser:
        raise InvalidConfig(f"{path}: missing [scenario] section")
    return scenario_from_section(dict(parser["scenario"]), seed)

import os

import numpy as np
import pytest
from hypothesis import settings

from stageids.detector import DetectorConfig
from stageids.flow_model import load_schema, restrict_to_schema
from stageids.forest import ForestConfig
from stageids.gcn import GcnConfig
from stageids.scenario import generate_trace, scenario_from_section

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY_SCENARIO = {"n_attackers": "2", "ips_per_attacker": "2", "n_targets": "6", "n_benign": "20",
                 "benign_rate": "0.4", "duration_s": "900", "stage_repetition": "6 12", "ae_follow_prob": "0.5"}


def tiny_trace(seed=0, **overrides):
    section = dict(TINY_SCENARIO, **{k: str(v) for k, v in overrides.items()})
    return restrict_to_schema(generate_trace(scenario_from_section(section, seed)), load_schema())


def tiny_detector_config(seed=0):
    return DetectorConfig(window_size=64, gcn=GcnConfig(hidden_dim=8, epochs=40), forest=ForestConfig(n_trees=8, max_depth=8),
                          seed=seed)


@pytest.fixture(scope="session")
def tiny_dataset():
    return tiny_trace(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

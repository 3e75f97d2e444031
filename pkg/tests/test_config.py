from importlib import resources

import pytest

from stageids.config import SEED_CODES, effective_text, load_config, parse_config
from stageids.detector import derive_seed
from stageids.errors import InvalidConfig


def example_text():
    return resources.files("stageids").joinpath("data/example.cfg").read_text()


def test_example_config_parses():
    cfg = parse_config(example_text())
    assert cfg.seed == 7
    assert cfg.detector.window_size == 256
    assert cfg.detector.gcn.hidden_dim == 32
    assert cfg.ae.T == 16 and cfg.ae_test_fraction == 0.3
    assert cfg.scenario_config().target_ips and len(cfg.scenario_config().attackers) == 3


def test_defaults_without_file():
    cfg = parse_config("")
    assert cfg.detector.forest.n_trees == 100
    assert cfg.detector.thresholds == {1: 0.5, 2: 0.5, 3: 0.5}


@pytest.mark.parametrize("text,needle", [
    ("[run]\ncolour = red\n", "colour"),
    ("[gcn]\nwidth = 3\n", "width"),
    ("[scenario]\nn_hackers = 3\n", "n_hackers"),
    ("[extras]\na = 1\n", "extras"),
    ("[seeds]\nforest = 3\n", "forest"),
])
def test_unknown_keys_are_named(text, needle):
    with pytest.raises(InvalidConfig, match=needle):
        parse_config(text)


@pytest.mark.parametrize("text", [
    "[gcn]\nepochs = many\n",
    "[detector]\nthreshold_2 = 1.5\n",
    "[run]\ntest_fraction = 0\n",
    "[run]\nsplit_key = port\n",
    "[detector]\nself_loops = maybe\n",
    "[scenario]\nae_follow_prob = x\n",
    "not an ini file",
])
def test_bad_values(text):
    with pytest.raises(InvalidConfig):
        parse_config(text)


def test_seed_derivation_and_overrides():
    cfg = parse_config("[run]\nseed = 3\n[seeds]\nsplit = 99\n")
    assert cfg.seed_for("split") == 99
    assert cfg.seed_for("detector") == derive_seed(3, SEED_CODES["detector"])
    assert cfg.detector_config().seed == cfg.seed_for("detector")
    assert cfg.ae_config().seed == cfg.seed_for("ae")
    assert cfg.scenario_config().seed == cfg.seed_for("scenario")
    moved = cfg.with_seed(4)
    assert moved.seed_for("split") == derive_seed(4, SEED_CODES["split"])
    assert len(set(cfg.with_seed(0).seeds.values())) == len(SEED_CODES)


def test_effective_echo_reproduces_config():
    cfg = parse_config(example_text())
    text = effective_text(cfg)
    assert text.splitlines()[0] == "# stageids-config v1"
    again = parse_config(text)
    assert effective_text(again) == text
    assert again.seeds == cfg.seeds
    assert again.detector_config() == cfg.detector_config()
    assert again.ae_config() == cfg.ae_config()
    assert again.scenario_config() == cfg.scenario_config()
    # every seed is explicit in the echo
    for name in SEED_CODES:
        assert f"{name} = {cfg.seed_for(name)}" in text


def test_echo_keeps_optional_values():
    cfg = parse_config("[forest]\nmax_features = 3\n[detector]\nstride = 32\nthreshold_3 = 0.7\n[ae]\nhorizon = 60\n")
    again = parse_config(effective_text(cfg))
    assert again.detector.forest.max_features == 3
    assert again.detector.stride == 32
    assert again.detector.thresholds[3] == 0.7
    assert again.ae.horizon == 60.0


def test_missing_file(tmp_path):
    with pytest.raises(InvalidConfig):
        load_config(tmp_path / "nope.cfg")

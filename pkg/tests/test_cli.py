import json

import pytest

from stageids import bundle
from stageids.cli import main

TINY_CFG = """\
[run]
seed = 3

[scenario]
n_attackers = 2
ips_per_attacker = 2
n_targets = 6
n_benign = 20
benign_rate = 0.4
duration_s = 900
stage_repetition = 6 12
ae_follow_prob = 0.5

[ae_scenario]
n_attackers = 6
ips_per_attacker = 2
n_targets = 40
n_benign = 20
benign_rate = 0.2
duration_s = 2000
stage_repetition = 6 12
ae_follow_prob = 0.5

[detector]
window_size = 64

[gcn]
hidden_dim = 8
epochs = 30

[forest]
n_trees = 8
max_depth = 8

[stacker]
folds = 3

[ae]
T = 4
hidden_dim = 4
epochs = 30
"""

ARTIFACTS = ["effective_config.ini", "trace.csv", "detectors.bundle", "metrics.bundle", "alerts.jsonl",
             "timeline.csv", "ae_trace.csv", "ae_dataset.jsonl", "ae_model.bundle", "ae_risk.csv",
             "ae_metrics.bundle"]


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_run_writes_all_artifacts(cfg_path, tmp_path, capsys):
    out = tmp_path / "run1"
    assert run("run", "--config", cfg_path, "--out", out) == 0
    for name in ARTIFACTS:
        first = (out / name).read_text().splitlines()[0]
        assert "stageids-" in first and " v1" in first, name
    printed = capsys.readouterr().out
    assert "Stage 1 Detector" in printed and "AE prediction" in printed


def test_runs_are_reproducible(cfg_path, tmp_path):
    for name in ("a", "b"):
        assert run("run", "--config", cfg_path, "--out", tmp_path / name, "--quiet") == 0
    for art in ("metrics.bundle", "detectors.bundle", "ae_model.bundle", "ae_metrics.bundle", "alerts.jsonl"):
        assert (tmp_path / "a" / art).read_bytes() == (tmp_path / "b" / art).read_bytes(), art


def test_effective_config_reruns_the_same_experiment(cfg_path, tmp_path):
    assert run("run", "--config", cfg_path, "--out", tmp_path / "a", "--quiet") == 0
    echo = tmp_path / "a" / "effective_config.ini"
    assert run("run", "--config", echo, "--out", tmp_path / "b", "--quiet") == 0
    assert (tmp_path / "a" / "metrics.bundle").read_bytes() == (tmp_path / "b" / "metrics.bundle").read_bytes()


def test_invalid_key_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[gcn]\nwidth = 4\n")
    assert run("run", "--config", p, "--out", tmp_path / "x") == 2
    err = capsys.readouterr().err
    assert "stageids run: error:" in err and "width" in err


def test_run_requires_config():
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2


def test_phase_by_phase(cfg_path, tmp_path, capsys):
    out = tmp_path / "steps"
    assert run("simulate", "--config", cfg_path, "--out", out, "--quiet") == 0
    assert run("ingest", out / "trace.csv", "--config", cfg_path, "--out", out / "ingest") == 0
    assert "malformed rows dropped" in capsys.readouterr().out
    assert run("train", "--config", cfg_path, "--data", out / "trace.csv", "--out", out, "--quiet") == 0
    model = out / "detectors.bundle"
    assert run("detect", "--config", cfg_path, "--model", model, "--data", out / "ae_trace.csv",
               "--out", out / "det", "--quiet") == 0
    assert (out / "det" / "alerts.jsonl").exists()
    assert run("predict-ae", "--config", cfg_path, "--data", out / "det" / "ae_dataset.jsonl",
               "--out", out / "ae", "--quiet") == 0
    assert run("predict-ae", "--config", cfg_path, "--data", out / "det" / "ae_dataset.jsonl",
               "--model", out / "ae" / "ae_model.bundle", "--out", out / "ae2", "--quiet") == 0
    assert (out / "ae2" / "ae_risk.csv").read_text().splitlines()[1] == "target_ip,probability,will_be_attacked,label"
    assert run("eval", "--config", cfg_path, "--model", model, "--data", out / "test.csv", "--out", out / "ev") == 0
    assert "Benchmark Model 3" in capsys.readouterr().out
    assert run("benchmark", "--config", cfg_path, "--out", out / "bench", "--quiet") == 0
    report = bundle.read(out / "bench" / "metrics.bundle", "metrics")
    assert sorted(report["stages"]) == ["1", "2", "3"]
    assert run("timeline", "--config", cfg_path, "--data", out / "ae_trace.csv",
               "--alerts", out / "det" / "alerts.jsonl", "--out", out / "tl", "--quiet") == 0
    assert (out / "tl" / "timeline.csv").read_text().startswith("# stageids-timeline v1")
    # alerts from another trace
    assert run("timeline", "--config", cfg_path, "--data", out / "test.csv",
               "--alerts", out / "det" / "alerts.jsonl", "--out", out / "tl") == 2
    assert "does not match" in capsys.readouterr().err


def test_missing_input_is_reported(tmp_path, capsys):
    assert run("ingest", tmp_path / "none.csv", "--out", tmp_path) == 2
    assert "stageids ingest: error:" in capsys.readouterr().err


def test_metrics_bundle_is_json(cfg_path, tmp_path):
    assert run("benchmark", "--config", cfg_path, "--out", tmp_path, "--quiet") == 0
    head, body = (tmp_path / "metrics.bundle").read_text().split("\n", 1)
    assert head == "stageids-metrics v1"
    d = json.loads(body)
    assert {"fingerprint", "stages", "reference_full_scale"} <= set(d)

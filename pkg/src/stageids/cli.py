"""``stageids`` command line: one subcommand per pipeline phase, plus ``run`` for all of them."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import ae as ae_mod
from . import bundle
from .config import PipelineConfig, load_config, write_effective
from .detector import DetectorSet, detect, read_alerts, train_all_stages, write_alerts
from .errors import StageIdsError
from .evaluation import (BenchmarkReport, config_fingerprint, evaluate_detection, ip_split, run_benchmark,
                         timeline_rows, write_timeline)
from .flow_model import (LabeledDataset, StageMapping, load_schema, parse_flows, restrict_to_schema,
                         write_flows)
from .scenario import generate_trace

logger = logging.getLogger("stageids")

RISK_VERSION_LINE = f"# stageids-ae-risk v{bundle.FORMAT_VERSION}"


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _mapping(cfg: PipelineConfig) -> StageMapping:
    return StageMapping.load(cfg.mapping) if cfg.mapping else StageMapping.load()


def _schema(cfg: PipelineConfig):
    return load_schema(cfg.schema) if cfg.schema else load_schema()


def _load_data(cfg: PipelineConfig, path: Optional[str]) -> LabeledDataset:
    """A flow CSV if one is given (argument, then config); otherwise a simulated trace."""
    path = path or cfg.data
    schema = _schema(cfg)
    if path:
        return parse_flows(path, schema, _mapping(cfg))
    return restrict_to_schema(generate_trace(cfg.scenario_config(), _mapping(cfg)), schema)


def write_risk(rows: List[list], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(RISK_VERSION_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ae_mod.RISK_HEADER)
        w.writerows(rows)


def train_ae(samples, cfg: PipelineConfig):
    """Split targets, fit the RNN, return (model, train, test, metrics)."""
    train, test = ae_mod.split_targets(samples, cfg.ae_test_fraction, cfg.seed_for("ae_split"))
    model, _ = ae_mod.train_rnn(train, cfg.ae_config())
    return model, train, test, ae_mod.evaluate_ae(model, train, test, cfg.ae.threshold)


def run_experiment(cfg: PipelineConfig, out: Path, say=print) -> dict:
    """Full pipeline; returns the paths of the artifacts written."""
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    write_effective(cfg, out / "effective_config.ini")
    paths["config"] = out / "effective_config.ini"
    mapping, schema = _mapping(cfg), _schema(cfg)
    if cfg.data:
        data = parse_flows(cfg.data, schema, mapping)
    else:
        raw = generate_trace(cfg.scenario_config(), mapping)
        write_flows(raw, out / "trace.csv")
        paths["trace"] = out / "trace.csv"
        data = restrict_to_schema(raw, schema)
    train, test, split = ip_split(data, cfg.test_fraction, cfg.seed_for("split"), cfg.split_key)
    say(f"split: {len(train)} train / {len(test)} test flows, {len(split.test_ips)} held-out IPs")
    for w in split.warnings:
        say(f"warning: {w}")
    fp_extra = {"mapping": mapping.fingerprint(), "seeds": cfg.seeds, "split_key": cfg.split_key,
                "test_fraction": cfg.test_fraction}
    report, detectors, detection = run_benchmark(train, test, cfg.detector_config(), extra_fingerprint=fp_extra)
    detectors.save(out / "detectors.bundle")
    report.save(out / "metrics.bundle")
    write_alerts(detection.alerts, out / "alerts.jsonl")
    write_timeline(timeline_rows(test, detection.alerts), out / "timeline.csv")
    paths.update(detectors=out / "detectors.bundle", metrics=out / "metrics.bundle",
                 alerts=out / "alerts.jsonl", timeline=out / "timeline.csv")
    say(report.render())

    ae_scn = cfg.ae_scenario_config()
    if ae_scn is not None:
        ae_raw = generate_trace(ae_scn, mapping)
        write_flows(ae_raw, out / "ae_trace.csv")
        paths["ae_trace"] = out / "ae_trace.csv"
        ae_data = restrict_to_schema(ae_raw, schema)
    else:
        ae_data = data
    ae_detection = detect(detectors, ae_data)
    samples = ae_mod.build_ae_dataset(ae_detection, ae_data, cfg.ae.T, cfg.ae.horizon)
    ae_mod.write_ae_dataset(samples, out / "ae_dataset.jsonl")
    model, _, held, ae_metrics = train_ae(samples, cfg)
    ae_mod.AePredictor(model, cfg.ae_config()).save(out / "ae_model.bundle")
    write_risk(ae_mod.risk_rows(model, held, cfg.ae.threshold), out / "ae_risk.csv")
    ae_metrics["fingerprint"] = report.fingerprint
    bundle.write(out / "ae_metrics.bundle", "ae-metrics", ae_metrics)
    paths.update(ae_dataset=out / "ae_dataset.jsonl", ae_model=out / "ae_model.bundle",
                 ae_risk=out / "ae_risk.csv", ae_metrics=out / "ae_metrics.bundle")
    say(f"AE prediction on {ae_metrics['n_test']} held-out targets: F1 {ae_metrics['f1']:.3f} "
        f"(majority baseline {ae_metrics['baseline_f1']:.3f})")
    return paths


# subcommands ---------------------------------------------------------------

def cmd_simulate(args, cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    mapping = _mapping(cfg)
    trace = generate_trace(cfg.scenario_config(), mapping)
    write_flows(trace, out / "trace.csv")
    _say(args, f"wrote {len(trace)} flows to {out / 'trace.csv'}")
    ae_scn = cfg.ae_scenario_config()
    if ae_scn is not None:
        ae_trace = generate_trace(ae_scn, mapping)
        write_flows(ae_trace, out / "ae_trace.csv")
        _say(args, f"wrote {len(ae_trace)} flows to {out / 'ae_trace.csv'}")
    return 0


def cmd_ingest(args, cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    data = parse_flows(args.input, _schema(cfg), _mapping(cfg))
    write_flows(data, out / "flows.csv")
    counts = np.bincount(data.labels_array, minlength=4)
    _say(args, f"{len(data)} flows ({data.malformed_rows} malformed rows dropped); "
               f"normal {counts[0]}, stage1 {counts[1]}, stage2 {counts[2]}, stage3 {counts[3]}")
    return 0


def cmd_train(args, cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    data = _load_data(cfg, args.data)
    train, test, split = ip_split(data, cfg.test_fraction, cfg.seed_for("split"), cfg.split_key)
    for w in split.warnings:
        _say(args, f"warning: {w}")
    detectors = train_all_stages(train, cfg.detector_config())
    detectors.save(out / "detectors.bundle")
    write_flows(train, out / "train.csv")
    write_flows(test, out / "test.csv")
    for stage, err in sorted(detectors.errors.items()):
        _say(args, f"stage {stage} not trained: {err}")
    _say(args, f"trained stages {sorted(detectors.detectors)}; wrote {out / 'detectors.bundle'}")
    return 0


def cmd_detect(args, cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    detectors = DetectorSet.load(args.model)
    data = _load_data(cfg, args.data)
    detection = detect(detectors, data)
    write_alerts(detection.alerts, out / "alerts.jsonl")
    _say(args, f"{len(detection.alerts)} alerts over {len(data)} flows")
    try:
        samples = ae_mod.build_ae_dataset(detection, data, cfg.ae.T, cfg.ae.horizon)
    except StageIdsError as exc:
        _say(args, f"no AE dataset: {exc}")
    else:
        ae_mod.write_ae_dataset(samples, out / "ae_dataset.jsonl")
        _say(args, f"AE dataset: {len(samples)} targets")
    return 0


def cmd_predict_ae(args, cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    samples = ae_mod.read_ae_dataset(args.data)
    if args.model:
        predictor = ae_mod.AePredictor.load(args.model)
        write_risk(ae_mod.risk_rows(predictor.model, samples, predictor.config.threshold), out / "ae_risk.csv")
        _say(args, f"scored {len(samples)} targets")
        return 0
    model, _, held, metrics = train_ae(samples, cfg)
    ae_mod.AePredictor(model, cfg.ae_config()).save(out / "ae_model.bundle")
    write_risk(ae_mod.risk_rows(model, held, cfg.ae.threshold), out / "ae_risk.csv")
    bundle.write(out / "ae_metrics.bundle", "ae-metrics", metrics)
    _say(args, f"held-out F1 {metrics['f1']:.3f} (majority baseline {metrics['baseline_f1']:.3f})")
    return 0


def cmd_eval(args, cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    detectors = DetectorSet.load(args.model)
    data = _load_data(cfg, args.data)
    detection = detect(detectors, data)
    fp = config_fingerprint({"detector": detectors.config.to_dict()})
    report = BenchmarkReport(evaluate_detection(detection, data), fp, dict(detectors.errors))
    report.save(out / "metrics.bundle")
    _say(args, report.render())
    return 0


def cmd_benchmark(args, cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    data = _load_data(cfg, args.data)
    train, test, split = ip_split(data, cfg.test_fraction, cfg.seed_for("split"), cfg.split_key)
    for w in split.warnings:
        _say(args, f"warning: {w}")
    report, detectors, _ = run_benchmark(train, test, cfg.detector_config(), extra_fingerprint={"seeds": cfg.seeds})
    report.save(out / "metrics.bundle")
    detectors.save(out / "detectors.bundle")
    _say(args, report.render())
    return 0


def cmd_timeline(args, cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    data = _load_data(cfg, args.data)
    alerts = read_alerts(args.alerts) if args.alerts else None
    rows = timeline_rows(data, alerts)
    write_timeline(rows, out / "timeline.csv")
    _say(args, f"{len(rows)} timeline rows")
    return 0


def cmd_run(args, cfg: PipelineConfig, out: Path) -> int:
    paths = run_experiment(cfg, out, say=lambda m: _say(args, m))
    _say(args, "artifacts: " + ", ".join(sorted(str(p.name) for p in paths.values())))
    return 0


COMMANDS = {
    "simulate": (cmd_simulate, "generate a synthetic trace (and AE trace if configured)"),
    "ingest": (cmd_ingest, "parse a flow CSV and write it in normalized form"),
    "train": (cmd_train, "IP-split a trace and train the three stage detectors"),
    "detect": (cmd_detect, "run trained detectors over a trace; write alerts and the AE dataset"),
    "predict-ae": (cmd_predict_ae, "train (or apply) the AE predictor on an AE dataset"),
    "eval": (cmd_eval, "score trained detectors on a labelled trace"),
    "benchmark": (cmd_benchmark, "detectors vs. the forest benchmark on an IP split"),
    "timeline": (cmd_timeline, "per-target and per-attacker stage timelines"),
    "run": (cmd_run, "the whole pipeline from one config file"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config (INI)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")
    parser = argparse.ArgumentParser(prog="stageids", description="Multi-stage attack detection and AE prediction.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "ingest":
            p.add_argument("input", help="flow CSV to ingest")
        if name in ("train", "detect", "eval", "benchmark", "timeline"):
            p.add_argument("--data", help="flow CSV (default: [run] data, else a simulated trace)")
        if name in ("detect", "eval"):
            p.add_argument("--model", required=True, help="detectors bundle")
        if name == "predict-ae":
            p.add_argument("--data", required=True, help="AE dataset (JSONL)")
            p.add_argument("--model", help="trained AE bundle; omit to train one")
        if name == "timeline":
            p.add_argument("--alerts", help="alert stream to overlay")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run" and not args.config:
        parser.error("run requires --config")
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out:
            cfg = replace(cfg, out=args.out)
        return COMMANDS[args.command][0](args, cfg, Path(cfg.out))
    except StageIdsError as exc:
        print(f"stageids {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"stageids {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

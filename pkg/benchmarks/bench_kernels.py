"""Compiled kernels vs the numpy fallback on a realistic workload.

Graphs come from the example scenario windowed at 256 flows; the split
search runs on the same features at a tree root and at a 64-sample node.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import math
import time

import numpy as np

from stageids.detector import DetectorConfig, build_graphs
from stageids.flow_model import StageLabel, load_schema, preprocess_features, restrict_to_schema
from stageids.graph import union_graphs
from stageids.kernels import _fallback
from stageids.scenario import ScenarioConfig, generate_trace

try:
    from stageids.kernels import _core
except ImportError:
    _core = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.array_equal(a, b) if isinstance(a, np.ndarray) else a == b


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--hidden", type=int, default=32)
    args = ap.parse_args(argv)
    if _core is None:
        print("compiled kernels not built; nothing to compare")
        return 1

    ds = restrict_to_schema(generate_trace(ScenarioConfig(seed=1)), load_schema())
    x, _ = preprocess_features(ds, True)
    _, graphs = build_graphs(ds, x, DetectorConfig(window_size=256))
    g = union_graphs(graphs)
    h = np.maximum(np.random.default_rng(0).normal(size=(g.node_count, args.hidden)), 0.0)
    y = np.asarray([lab is StageLabel.STAGE1 for lab in ds.stage_labels], dtype=np.int64)
    samples = np.arange(x.shape[0], dtype=np.int64)
    leafish = np.sort(np.random.default_rng(1).choice(x.shape[0], 64, replace=False)).astype(np.int64)
    feats = np.arange(math.ceil(math.sqrt(x.shape[1])), dtype=np.int64)
    print(f"graph: {g.node_count} nodes, {g.indices.shape[0]} stored entries, hidden {args.hidden}; "
          f"split: {x.shape[0]} samples x {feats.size} features")

    cases = [
        ("csr_matmul", lambda m: m.csr_matmul(g.indptr, g.indices, g.norm_coeffs, h)),
        ("csr_matmul_exact", lambda m: m.csr_matmul_exact(g.indptr, g.indices, g.norm_coeffs, h)),
        ("best_split root", lambda m: m.best_split(x, y, samples, feats, 2)),
        ("best_split 64", lambda m: m.best_split(x, y, leafish, feats, 2)),
    ]
    print(f"{'kernel':<18}{'cython ms':>11}{'numpy ms':>11}{'speedup':>9}  identical")
    for name, call in cases:
        tc, oc = best_of(lambda: call(_core), args.repeat)
        tf, of = best_of(lambda: call(_fallback), args.repeat)
        print(f"{name:<18}{tc * 1e3:>11.3f}{tf * 1e3:>11.3f}{tf / tc:>8.1f}x  {same(oc, of)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

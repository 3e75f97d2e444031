"""Windowing and flow-graph construction.

Nodes are flows; two flows are adjacent when they share an endpoint IP.
Adjacency is stored as CSR with the symmetric degree normalization
``1 / sqrt(|N(i)| |N(j)|)`` attached to every stored entry.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np

from . import kernels
from .errors import DimensionMismatch, GraphTooDense, WindowTooSmall
from .flow_model import LabeledDataset

DEFAULT_WINDOW = 1024
DEFAULT_BUCKET_CAP = 4096


@dataclass(frozen=True)
class Window:
    start: int
    end: int
    window_id: int = 0

    def __len__(self):
        return self.end - self.start


def window_flows(dataset: LabeledDataset | int, window_size: int = DEFAULT_WINDOW,
                 stride: Optional[int] = None) -> List[Window]:
    """Split flows (in timestamp order) into windows of at most ``window_size``.

    A window starts every ``stride`` flows until one reaches the end; the last
    window may be short.
    """
    n = dataset if isinstance(dataset, int) else len(dataset)
    stride = window_size if stride is None else stride
    if window_size < 2 or not 1 <= stride <= window_size:
        raise ValueError(f"need W >= 2 and 1 <= S <= W, got W={window_size}, S={stride}")
    windows = []
    start = 0
    while start < n:
        end = min(start + window_size, n)
        windows.append(Window(start, end, len(windows)))
        if end == n:
            break
        start += stride
    return windows


@dataclass(frozen=True, eq=False)
class FlowGraph:
    node_features: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    norm_coeffs: np.ndarray
    self_loops: bool
    flow_index: np.ndarray
    window_ids: np.ndarray = field(default=None)

    @property
    def node_count(self) -> int:
        return self.indptr.shape[0] - 1

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def neighbor_lists(self) -> List[np.ndarray]:
        return [self.neighbors(i) for i in range(self.node_count)]

    def coeff(self, i: int, j: int) -> float:
        nb = self.neighbors(i)
        k = np.searchsorted(nb, j)
        if k >= nb.shape[0] or nb[k] != j:
            raise KeyError((i, j))
        return float(self.norm_coeffs[self.indptr[i] + k])

    def edge_set(self) -> Set[Tuple[int, int]]:
        """Undirected edges as ``(i, j)`` with ``i < j``; self-loops excluded."""
        rows = np.repeat(np.arange(self.node_count), self.degrees)
        keep = rows < self.indices
        return set(zip(rows[keep].tolist(), self.indices[keep].tolist()))

    @property
    def isolated_nodes(self) -> List[int]:
        """Nodes with no neighbor other than (possibly) themselves."""
        deg = self.degrees - (1 if self.self_loops else 0)
        return np.flatnonzero(deg == 0).tolist()

    def aggregate(self, h: np.ndarray, exact: bool = False) -> np.ndarray:
        """``sum_{j in N(i)} coeff(i, j) * h[j]`` for every node i.

        The default sums each row in neighbor order. ``exact=True`` returns the
        correctly rounded sum, which does not change when nodes are relabeled,
        at roughly five times the cost.
        """
        if h.shape[0] != self.node_count:
            raise DimensionMismatch(f"matrix has {h.shape[0]} rows, graph has {self.node_count} nodes")
        kernel = kernels.csr_matmul_exact if exact else kernels.csr_matmul
        return kernel(self.indptr, self.indices, self.norm_coeffs, np.ascontiguousarray(h, dtype=np.float64))

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count))
        rows = np.repeat(np.arange(self.node_count), self.degrees)
        a[rows, self.indices] = 1.0
        return a


def _csr_from_pairs(n: int, src: np.ndarray, dst: np.ndarray):
    key = np.unique(src * n + dst)
    rows, cols = np.divmod(key, n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return indptr, cols.astype(np.int64)


def _with_coeffs(indptr, indices):
    deg = np.diff(indptr).astype(np.float64)
    rows = np.repeat(np.arange(deg.shape[0]), np.diff(indptr))
    return 1.0 / np.sqrt(deg[rows] * deg[indices])


def build_flow_graph(dataset: LabeledDataset, window: Window, features: np.ndarray,
                     self_loops: bool = True, bucket_cap: int = DEFAULT_BUCKET_CAP) -> FlowGraph:
    """Connect flows of ``window`` that share any endpoint IP.

    Flows are bucketed per IP and edges are emitted inside each bucket, so
    cost scales with the bucket sizes rather than the window size squared.
    """
    n = len(window)
    if n < 1:
        raise WindowTooSmall(f"window [{window.start}, {window.end}) is empty")
    if features.shape[0] != n:
        raise DimensionMismatch(f"feature rows {features.shape[0]} != window length {n}")
    buckets = defaultdict(list)
    for local, flow in enumerate(dataset.flows[window.start:window.end]):
        buckets[flow.src_ip].append(local)
        if flow.dst_ip != flow.src_ip:
            buckets[flow.dst_ip].append(local)
    src_parts, dst_parts = [], []
    for ip, members in buckets.items():
        if len(members) > bucket_cap:
            raise GraphTooDense(f"IP {ip} has {len(members)} flows in one window (cap {bucket_cap})")
        if len(members) < 2:
            continue
        m = np.asarray(members, dtype=np.int64)
        a, b = np.meshgrid(m, m, indexing="ij")
        off = a != b
        src_parts.append(a[off])
        dst_parts.append(b[off])
    if self_loops:
        src_parts.append(np.arange(n, dtype=np.int64))
        dst_parts.append(np.arange(n, dtype=np.int64))
    src = np.concatenate(src_parts) if src_parts else np.zeros(0, dtype=np.int64)
    dst = np.concatenate(dst_parts) if dst_parts else np.zeros(0, dtype=np.int64)
    indptr, indices = _csr_from_pairs(n, src, dst)
    return FlowGraph(
        node_features=np.ascontiguousarray(features, dtype=np.float64),
        indptr=indptr,
        indices=indices,
        norm_coeffs=_with_coeffs(indptr, indices),
        self_loops=self_loops,
        flow_index=np.arange(window.start, window.end, dtype=np.int64),
        window_ids=np.full(n, window.window_id, dtype=np.int64),
    )


def union_graphs(graphs: Sequence[FlowGraph]) -> FlowGraph:
    """Disjoint union (block-diagonal adjacency) of several window graphs."""
    if not graphs:
        raise WindowTooSmall("no graphs to join")
    offsets = np.cumsum([0] + [g.node_count for g in graphs])
    nnz_off = np.cumsum([0] + [g.indices.shape[0] for g in graphs])
    indptr = np.concatenate([[0]] + [g.indptr[1:] + nnz_off[k] for k, g in enumerate(graphs)]).astype(np.int64)
    return FlowGraph(
        node_features=np.vstack([g.node_features for g in graphs]),
        indptr=indptr,
        indices=np.concatenate([g.indices + offsets[k] for k, g in enumerate(graphs)]).astype(np.int64),
        norm_coeffs=np.concatenate([g.norm_coeffs for g in graphs]),
        self_loops=all(g.self_loops for g in graphs),
        flow_index=np.concatenate([g.flow_index for g in graphs]),
        window_ids=np.concatenate([g.window_ids for g in graphs]),
    )


def graph_from_edges(features: np.ndarray, edges, self_loops: bool = True) -> FlowGraph:
    """Build a graph directly from an undirected edge list (tests, tooling)."""
    n = features.shape[0]
    e = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    if self_loops:
        src = np.concatenate([src, np.arange(n)])
        dst = np.concatenate([dst, np.arange(n)])
    indptr, indices = _csr_from_pairs(n, src, dst)
    return FlowGraph(np.ascontiguousarray(features, dtype=np.float64), indptr, indices,
                     _with_coeffs(indptr, indices), self_loops,
                     np.arange(n, dtype=np.int64), np.zeros(n, dtype=np.int64))


def dump_graph(graph: FlowGraph, edge_path, feature_path) -> None:
    """Write ``i j coeff`` lines and a node-feature CSV."""
    rows = np.repeat(np.arange(graph.node_count), graph.degrees)
    with open(edge_path, "w") as fh:
        fh.write("# stageids-graph-edges v1\n")
        for i, j, c in zip(rows.tolist(), graph.indices.tolist(), graph.norm_coeffs.tolist()):
            fh.write(f"{i} {j} {c!r}\n")
    np.savetxt(Path(feature_path), graph.node_features, delimiter=",", fmt="%.17g",
               header="stageids-graph-features v1")

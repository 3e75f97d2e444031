"""Slow, obviously-correct reference implementations used as test oracles.

None of these import the package internals they check.
"""

import numpy as np


def pairwise_edges(endpoints):
    """All (i, j), i < j, whose endpoint sets intersect. O(N^2)."""
    sets = [set(e) for e in endpoints]
    return {(i, j) for i in range(len(sets)) for j in range(i + 1, len(sets)) if sets[i] & sets[j]}


def dense_norm_adjacency(n, edges, self_loops=True):
    a = np.zeros((n, n))
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    if self_loops:
        a += np.eye(n)
    deg = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        inv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    return inv[:, None] * a * inv[None, :]


def dense_gcn(a_hat, x, layer_weights, head_w, head_b):
    h = x
    for k, w in enumerate(layer_weights):
        h = a_hat @ h @ w
        if k < len(layer_weights) - 1:
            h = np.maximum(h, 0.0)
    logits = h @ head_w + head_b
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True), h


def count_confusion(pred, label):
    tp = fp = tn = fn = 0
    for p, y in zip(pred, label):
        if p and y:
            tp += 1
        elif p and not y:
            fp += 1
        elif not p and not y:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def finite_difference(f, params, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of every array in ``params`` (mutated in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        den = np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / den)))
    return worst


def best_split_exhaustive(x, y, min_leaf):
    """(feature, threshold, weighted gini) minimizing impurity; midpoints; ties to lowest feature then threshold."""
    n, f = x.shape
    best = (-1, 0.0, np.inf)
    for j in range(f):
        vals = np.unique(x[:, j])
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2
            left = x[:, j] <= thr
            nl, nr = left.sum(), (~left).sum()
            if nl < min_leaf or nr < min_leaf:
                continue
            imp = 0.0
            for side, m in ((left, nl), (~left, nr)):
                p = y[side].mean()
                imp += m / n * (1 - p * p - (1 - p) * (1 - p))
            if imp < best[2] - 1e-15:
                best = (j, thr, imp)
    return best

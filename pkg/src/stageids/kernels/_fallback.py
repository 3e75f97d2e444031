"""Pure-numpy versions of the compiled kernels."""

import math

import numpy as np


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _positions(indptr):
    """Rows ordered by degree, so the rows holding a p-th entry are a prefix."""
    deg = np.diff(indptr)
    rows = np.argsort(-deg, kind="stable")
    sorted_deg = deg[rows]
    return deg, rows, -sorted_deg, indptr[:-1][rows], int(sorted_deg[0]) if rows.size else 0


def csr_matmul(indptr, indices, data, x):
    """Row-wise ``sum_k data[k] * x[indices[k]]`` accumulated in CSR order.

    Rows are processed position by position (all rows' first entry, then all
    rows' second entry, ...) so each row is summed in the same order as the
    compiled loop.
    """
    n = indptr.shape[0] - 1
    out = np.zeros((n, x.shape[1]), dtype=np.float64)
    if n == 0 or indices.shape[0] == 0:
        return out
    _, rows, neg_deg, starts, depth = _positions(indptr)
    for p in range(depth):
        active = int(np.searchsorted(neg_deg, -p, side="left"))
        r = rows[:active]
        k = starts[:active] + p
        out[r] = out[r] + data[k][:, None] * x[indices[k]]
    return out


def csr_matmul_exact(indptr, indices, data, x):
    """Row-wise ``sum_k data[k] * x[indices[k]]``, correctly rounded.

    Rows are swept position by position (every row's first entry, then every
    row's second entry, ...) with a double-double accumulator that tracks
    what its low word lost. Entries whose loss could move the rounding are
    recomputed with ``math.fsum``, so the result does not depend on the
    order of the terms.
    """
    n = indptr.shape[0] - 1
    d = x.shape[1]
    hi = np.zeros((n, d), dtype=np.float64)
    if n == 0 or d == 0 or indices.shape[0] == 0:
        return hi
    lo = np.zeros_like(hi)
    lost = np.zeros_like(hi)
    deg, rows, neg_deg, starts, depth = _positions(indptr)
    for p in range(depth):
        active = int(np.searchsorted(neg_deg, -p, side="left"))
        r = rows[:active]
        k = starts[:active] + p
        s, e = _two_sum(hi[r], data[k][:, None] * x[indices[k]])
        hi[r] = s
        s2, e2 = _two_sum(lo[r], e)
        lo[r] = s2
        lost[r] += np.abs(e2)
    with np.errstate(invalid="ignore", over="ignore"):
        out = hi + lo
        res = (hi - out) + lo
        bound = lost * (1.0 + (deg[:, None] + 2) * 2.0 ** -53)
        a = np.abs(out)
        gap = np.minimum(np.nextafter(a, np.inf) - a, a - np.nextafter(a, 0.0))
        # out is the correct rounding when the exact sum stays within half a gap of it
        ok = (lost == 0) | ~np.isfinite(out)
        ok |= np.abs(res) * (1.0 + 2.0 ** -51) + bound < gap * 0.5
    for i, t in zip(*np.nonzero(~ok)):
        a, b = indptr[i], indptr[i + 1]
        out[i, t] = math.fsum((data[a:b] * x[indices[a:b], t]).tolist())
    return out


def best_split(x, y, samples, features, min_leaf):
    """Return (feature, threshold, score); feature is -1 when no split is valid.

    ``score`` is ``sum_c nL_c^2 / nL + sum_c nR_c^2 / nR``, which is maximal
    exactly where the weighted Gini impurity of the children is minimal.
    """
    n = samples.shape[0]
    best_f, best_thr, best_score = -1, 0.0, -1.0
    if n < 2:
        return best_f, best_thr, best_score
    ys = y[samples]
    tot1 = int(ys.sum())
    nl = np.arange(1, n, dtype=np.int64)
    nr = n - nl
    size_ok = (nl >= min_leaf) & (nr >= min_leaf)
    for f in features:
        vals = x[samples, f]
        order = np.argsort(vals, kind="stable")
        v = vals[order]
        l1 = np.cumsum(ys[order])[:-1]
        l0 = nl - l1
        r1 = tot1 - l1
        r0 = nr - r1
        valid = size_ok & (v[:-1] != v[1:])
        if not valid.any():
            continue
        score = (l0 * l0 + l1 * l1) / nl + (r0 * r0 + r1 * r1) / nr
        score = np.where(valid, score, -np.inf)
        k = int(np.argmax(score))
        if score[k] > best_score:
            thr = (v[k] + v[k + 1]) * 0.5
            if thr >= v[k + 1]:
                thr = v[k]
            best_f, best_thr, best_score = int(f), float(thr), float(score[k])
    return best_f, best_thr, best_score

# distutils: language = c++
# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Semantics mirror ``_fallback`` operation for operation."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs, fmin, isfinite, nextafter
from libc.stdlib cimport free, malloc

cnp.import_array()

ctypedef cnp.int64_t i64


cdef double U = 1.1102230246251565e-16  # 2**-53


cdef double _fsum_column(const i64[::1] indices, const double[::1] data, const double[:, ::1] x,
                         Py_ssize_t start, Py_ssize_t stop, Py_ssize_t t) noexcept nogil:
    """Correctly rounded sum of ``data[k] * x[indices[k], t]`` (Shewchuk partials, as math.fsum)."""
    cdef double partials[64]
    cdef int m = 0, i, p
    cdef double v, y, hi, lo = 0.0, yr
    cdef Py_ssize_t k
    for k in range(start, stop):
        v = data[k] * x[indices[k], t]
        i = 0
        for p in range(m):
            y = partials[p]
            if fabs(v) < fabs(y):
                v, y = y, v
            hi = v + y
            lo = y - (hi - v)
            if lo != 0.0:
                partials[i] = lo
                i += 1
            v = hi
        partials[i] = v
        m = i + 1
    if m == 0:
        return 0.0
    m -= 1
    hi = partials[m]
    lo = 0.0
    while m > 0:
        v = hi
        m -= 1
        y = partials[m]
        hi = v + y
        yr = hi - v
        lo = y - yr
        if lo != 0.0:
            break
    if m > 0 and ((lo < 0.0 and partials[m - 1] < 0.0) or (lo > 0.0 and partials[m - 1] > 0.0)):
        y = lo * 2.0
        v = hi + y
        yr = v - hi
        if y == yr:
            hi = v
    return hi


cdef void _dd_row(const double* c, const i64* idx, Py_ssize_t m, const double* x, Py_ssize_t d,
                  double* hi, double* lo, double* lost) noexcept nogil:
    """Double-double sums of one CSR row; ``lost`` bounds what the low word dropped."""
    cdef Py_ssize_t k, t
    cdef double ck, p, s, bb, a, e, l, s2
    cdef const double* xr
    for t in range(d):
        hi[t] = 0.0
        lo[t] = 0.0
        lost[t] = 0.0
    for k in range(m):
        ck = c[k]
        xr = x + idx[k] * d
        for t in range(d):
            p = ck * xr[t]
            a = hi[t]
            s = a + p
            bb = s - a
            e = (a - (s - bb)) + (p - bb)
            hi[t] = s
            l = lo[t]
            s2 = l + e
            bb = s2 - l
            lost[t] += fabs((l - (s2 - bb)) + (e - bb))
            lo[t] = s2


def csr_matmul(const i64[::1] indptr, const i64[::1] indices, const double[::1] data,
               const double[:, ::1] x):
    """Row-wise ``sum_k data[k] * x[indices[k]]`` accumulated in CSR order."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, k, t, j
    cdef double c
    with nogil:
        for i in range(n):
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                c = data[k]
                for t in range(d):
                    o[i, t] = o[i, t] + c * x[j, t]
    return out


def csr_matmul_exact(const i64[::1] indptr, const i64[::1] indices, const double[::1] data,
                     const double[:, ::1] x):
    """Row-wise ``sum_k data[k] * x[indices[k]]``, correctly rounded.

    Each entry is accumulated in double-double while tracking what the low
    word lost. The rounded double-double value is accepted when nothing was
    lost or the loss cannot move the rounding; otherwise the entry is
    recomputed exactly. The result is therefore independent of term order.
    """
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    out = np.zeros((n, d), dtype=np.float64)
    if n == 0 or d == 0 or indices.shape[0] == 0:
        return out
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, t, start, m
    cdef double s, r, res, bound, a, gap
    cdef double* buf = <double*>malloc(3 * d * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double* hi = buf
    cdef double* lo = buf + d
    cdef double* lost = buf + 2 * d
    try:
        with nogil:
            for i in range(n):
                start = indptr[i]
                m = indptr[i + 1] - start
                _dd_row(&data[start], &indices[start], m, &x[0, 0], d, hi, lo, lost)
                for t in range(d):
                    s = hi[t]
                    r = s + lo[t]
                    if lost[t] == 0.0 or not isfinite(r):
                        o[i, t] = r
                        continue
                    res = (s - r) + lo[t]
                    bound = lost[t] * (1.0 + (m + 2) * U)
                    a = fabs(r)
                    gap = fmin(nextafter(a, INFINITY) - a, a - nextafter(a, 0.0))
                    if fabs(res) * (1.0 + 4.0 * U) + bound < gap * 0.5:
                        o[i, t] = r
                    else:
                        o[i, t] = _fsum_column(indices, data, x, start, start + m, t)
    finally:
        free(buf)
    return out


cdef extern from *:
    """
    #include <algorithm>
    struct Pair { double v; long long y; };
    static inline bool pair_less(const Pair& a, const Pair& b) { return a.v < b.v; }
    static inline void sort_pairs(Pair* p, Py_ssize_t n) { std::sort(p, p + n, pair_less); }
    """
    ctypedef struct Pair:
        double v
        i64 y
    void sort_pairs(Pair* p, Py_ssize_t n) noexcept nogil


def best_split(const double[:, ::1] x, const i64[::1] y, const i64[::1] samples,
               const i64[::1] features, i64 min_leaf):
    """Return (feature, threshold, score); feature is -1 when no split is valid."""
    cdef Py_ssize_t n = samples.shape[0]
    cdef Py_ssize_t nf = features.shape[0]
    cdef Py_ssize_t fi, k
    cdef i64 f, tot1 = 0, l0, l1, r0, r1, nl, nr
    cdef double score, thr
    cdef double best_score = -1.0
    cdef double best_thr = 0.0
    cdef i64 best_f = -1
    if n < 2:
        return -1, 0.0, -1.0
    for k in range(n):
        tot1 += y[samples[k]]
    cdef Pair* buf = <Pair*>malloc(n * sizeof(Pair))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for fi in range(nf):
                f = features[fi]
                for k in range(n):
                    buf[k].v = x[samples[k], f]
                    buf[k].y = y[samples[k]]
                sort_pairs(buf, n)
                l0 = 0
                l1 = 0
                for k in range(n - 1):
                    if buf[k].y:
                        l1 += 1
                    else:
                        l0 += 1
                    if buf[k].v == buf[k + 1].v:
                        continue
                    nl = k + 1
                    nr = n - nl
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    r1 = tot1 - l1
                    r0 = nr - r1
                    score = <double>(l0 * l0 + l1 * l1) / <double>nl + <double>(r0 * r0 + r1 * r1) / <double>nr
                    if score > best_score:
                        thr = (buf[k].v + buf[k + 1].v) * 0.5
                        if thr >= buf[k + 1].v:
                            thr = buf[k].v
                        best_score = score
                        best_thr = thr
                        best_f = f
    finally:
        free(buf)
    return best_f, best_thr, best_score

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: 1-D weighted k-means (Lloyd and exact DP) and the
neighbour-averaging system used by noisy linear imputation.

Every function here has a pure-Python twin in ``_kernels_py`` with the same
signature and results; ``ibo_eval.kernels`` picks one at import.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, INFINITY

cnp.import_array()


def lloyd_1d(const double[::1] values, const double[::1] weights,
             centroids_in, int max_iter=300):
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t k = len(centroids_in)
    cdef double[::1] c = np.array(centroids_in, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = np.full(n, -1, dtype=np.int64)
    cdef double[::1] sw = np.zeros(k, dtype=np.float64)
    cdef double[::1] swx = np.zeros(k, dtype=np.float64)
    cdef Py_ssize_t i, m, best, it
    cdef double d, bestd, wcss
    cdef bint changed
    history = []
    it = 0
    while it < max_iter:
        changed = False
        for i in range(n):
            best = 0
            bestd = fabs(values[i] - c[0])
            for m in range(1, k):
                d = fabs(values[i] - c[m])
                if d < bestd:
                    bestd = d
                    best = m
            if labels[i] != best:
                labels[i] = best
                changed = True
        if not changed and it > 0:
            break
        for m in range(k):
            sw[m] = 0.0
            swx[m] = 0.0
        for i in range(n):
            sw[labels[i]] += weights[i]
            swx[labels[i]] += weights[i] * values[i]
        for m in range(k):
            if sw[m] > 0:
                c[m] = swx[m] / sw[m]
        wcss = 0.0
        for i in range(n):
            d = values[i] - c[labels[i]]
            wcss += weights[i] * d * d
        history.append(wcss)
        it += 1
    return np.asarray(labels), np.asarray(c), np.asarray(history, dtype=np.float64), it


cdef inline double _cost(const double[::1] s0, const double[::1] s1,
                         const double[::1] s2, Py_ssize_t j, Py_ssize_t i) nogil:
    cdef double w = s0[i + 1] - s0[j]
    cdef double t = s1[i + 1] - s1[j]
    cdef double r = s2[i + 1] - s2[j] - t * t / w
    return r if r > 0 else 0.0


cdef void _layer(const double[::1] s0, const double[::1] s1, const double[::1] s2,
                 const double[::1] prev, double[::1] cur, cnp.int64_t[::1] arg,
                 Py_ssize_t m, Py_ssize_t lo, Py_ssize_t hi,
                 Py_ssize_t optlo, Py_ssize_t opthi) nogil:
    cdef Py_ssize_t mid, j, jlo, jhi, bestj
    cdef double best, v
    if lo > hi:
        return
    mid = (lo + hi) // 2
    jlo = optlo if optlo > m else m
    jhi = opthi if opthi < mid else mid
    best = INFINITY
    bestj = jlo
    for j in range(jlo, jhi + 1):
        v = prev[j - 1] + _cost(s0, s1, s2, j, mid)
        if v < best:
            best = v
            bestj = j
    cur[mid] = best
    arg[mid] = bestj
    _layer(s0, s1, s2, prev, cur, arg, m, lo, mid - 1, optlo, bestj)
    _layer(s0, s1, s2, prev, cur, arg, m, mid + 1, hi, bestj, opthi)


def kmeans1d_dp(const double[::1] values, const double[::1] weights, int k):
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t i, m, j
    if k < 1 or n < k:
        raise ValueError("need at least k values")
    s0_a = np.zeros(n + 1)
    s1_a = np.zeros(n + 1)
    s2_a = np.zeros(n + 1)
    w_a = np.asarray(weights)
    x_a = np.asarray(values)
    s0_a[1:] = np.cumsum(w_a)
    s1_a[1:] = np.cumsum(w_a * x_a)
    s2_a[1:] = np.cumsum(w_a * x_a * x_a)
    cdef double[::1] s0 = s0_a
    cdef double[::1] s1 = s1_a
    cdef double[::1] s2 = s2_a
    cdef double[:, ::1] D = np.full((k, n), np.inf)
    cdef cnp.int64_t[:, ::1] B = np.zeros((k, n), dtype=np.int64)
    for i in range(n):
        D[0, i] = _cost(s0, s1, s2, 0, i)
    for m in range(1, k):
        _layer(s0, s1, s2, D[m - 1], D[m], B[m], m, m, n - 1, m, n - 1)
    labels = np.zeros(n, dtype=np.int64)
    i = n - 1
    for m in range(k - 1, 0, -1):
        j = B[m, i]
        labels[j:i + 1] = m
        i = j - 1
    return labels, float(D[k - 1, n - 1])


cdef double _INV_SQRT2 = 1.0 / sqrt(2.0)


def nli_system(mask_in):
    """Assemble the averaging system for masked pixels (8-neighbourhood)."""
    cdef cnp.uint8_t[:, ::1] mask = np.ascontiguousarray(mask_in, dtype=np.uint8)
    cdef Py_ssize_t H = mask.shape[0], W = mask.shape[1]
    cdef cnp.int64_t[:, ::1] index = np.full((H, W), -1, dtype=np.int64)
    cdef Py_ssize_t y, x, dy, dx, yy, xx, p, cnt = 0
    cdef double wsum, w
    for y in range(H):
        for x in range(W):
            if mask[y, x]:
                index[y, x] = cnt
                cnt += 1
    # at most 9 entries per masked pixel in A and 8 in B
    a_rows_a = np.empty(9 * cnt, dtype=np.int64)
    a_cols_a = np.empty(9 * cnt, dtype=np.int64)
    a_vals_a = np.empty(9 * cnt, dtype=np.float64)
    b_rows_a = np.empty(8 * cnt, dtype=np.int64)
    b_src_a = np.empty(8 * cnt, dtype=np.int64)
    b_vals_a = np.empty(8 * cnt, dtype=np.float64)
    cdef cnp.int64_t[::1] a_rows = a_rows_a, a_cols = a_cols_a, b_rows = b_rows_a, b_src = b_src_a
    cdef double[::1] a_vals = a_vals_a, b_vals = b_vals_a
    cdef Py_ssize_t na = 0, nb = 0
    for y in range(H):
        for x in range(W):
            if not mask[y, x]:
                continue
            p = index[y, x]
            wsum = 0.0
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    if dy == 0 and dx == 0:
                        continue
                    yy = y + dy
                    xx = x + dx
                    if yy < 0 or yy >= H or xx < 0 or xx >= W:
                        continue
                    wsum += 1.0 if (dy == 0 or dx == 0) else _INV_SQRT2
            a_rows[na] = p
            a_cols[na] = p
            a_vals[na] = 1.0
            na += 1
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    if dy == 0 and dx == 0:
                        continue
                    yy = y + dy
                    xx = x + dx
                    if yy < 0 or yy >= H or xx < 0 or xx >= W:
                        continue
                    w = (1.0 if (dy == 0 or dx == 0) else _INV_SQRT2) / wsum
                    if mask[yy, xx]:
                        a_rows[na] = p
                        a_cols[na] = index[yy, xx]
                        a_vals[na] = -w
                        na += 1
                    else:
                        b_rows[nb] = p
                        b_src[nb] = yy * W + xx
                        b_vals[nb] = w
                        nb += 1
    return (
        np.asarray(index),
        a_rows_a[:na],
        a_cols_a[:na],
        a_vals_a[:na],
        b_rows_a[:nb],
        b_src_a[:nb],
        b_vals_a[:nb],
    )

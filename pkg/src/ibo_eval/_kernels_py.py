"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def lloyd_1d(values, weights, centroids_in, max_iter=300):
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    c = np.array(centroids_in, dtype=np.float64)
    k = c.shape[0]
    labels = np.full(values.shape[0], -1, dtype=np.int64)
    history = []
    it = 0
    while it < max_iter:
        # argmin returns the first minimum, matching the compiled tie rule
        new = np.argmin(np.abs(values[:, None] - c[None, :]), axis=1).astype(np.int64)
        if it > 0 and np.array_equal(new, labels):
            break
        labels = new
        sw = np.bincount(labels, weights=weights, minlength=k)
        swx = np.bincount(labels, weights=weights * values, minlength=k)
        nz = sw > 0
        c[nz] = swx[nz] / sw[nz]
        d = values - c[labels]
        history.append(float(np.sum(weights * d * d)))
        it += 1
    return labels, c, np.asarray(history, dtype=np.float64), it


def _cost(s0, s1, s2, j, i):
    w = s0[i + 1] - s0[j]
    t = s1[i + 1] - s1[j]
    r = s2[i + 1] - s2[j] - t * t / w
    return np.maximum(r, 0.0)


def kmeans1d_dp(values, weights, k):
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = values.shape[0]
    if k < 1 or n < k:
        raise ValueError("need at least k values")
    s0 = np.concatenate([[0.0], np.cumsum(weights)])
    s1 = np.concatenate([[0.0], np.cumsum(weights * values)])
    s2 = np.concatenate([[0.0], np.cumsum(weights * values * values)])
    D = np.full((k, n), np.inf)
    B = np.zeros((k, n), dtype=np.int64)
    D[0] = _cost(s0, s1, s2, 0, np.arange(n))
    for m in range(1, k):
        prev, cur, arg = D[m - 1], D[m], B[m]
        # explicit stack instead of recursion; the optimal split is monotone in i
        stack = [(m, n - 1, m, n - 1)]
        while stack:
            lo, hi, optlo, opthi = stack.pop()
            if lo > hi:
                continue
            mid = (lo + hi) // 2
            js = np.arange(max(optlo, m), min(mid, opthi) + 1)
            v = prev[js - 1] + _cost(s0, s1, s2, js, mid)
            best = int(np.argmin(v))
            cur[mid] = v[best]
            arg[mid] = js[best]
            stack.append((lo, mid - 1, optlo, int(js[best])))
            stack.append((mid + 1, hi, int(js[best]), opthi))
    labels = np.zeros(n, dtype=np.int64)
    i = n - 1
    for m in range(k - 1, 0, -1):
        j = B[m, i]
        labels[j:i + 1] = m
        i = j - 1
    return labels, float(D[k - 1, n - 1])


_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def nli_system(mask_in):
    mask = np.asarray(mask_in).astype(bool)
    H, W = mask.shape
    index = np.full((H, W), -1, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    n = ys.size
    index[ys, xs] = np.arange(n)

    wsum = np.zeros(n)
    for dy, dx in _OFFSETS:
        yy, xx = ys + dy, xs + dx
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        wsum += ok * (1.0 if dy == 0 or dx == 0 else _INV_SQRT2)

    a_rows, a_cols, a_vals = [np.arange(n)], [np.arange(n)], [np.ones(n)]
    b_rows, b_src, b_vals = [], [], []
    for dy, dx in _OFFSETS:
        base = 1.0 if dy == 0 or dx == 0 else _INV_SQRT2
        yy, xx = ys + dy, xs + dx
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        p = np.nonzero(ok)[0]
        yq, xq = yy[ok], xx[ok]
        w = base / wsum[p]
        inner = mask[yq, xq]
        a_rows.append(p[inner])
        a_cols.append(index[yq[inner], xq[inner]])
        a_vals.append(-w[inner])
        b_rows.append(p[~inner])
        b_src.append(yq[~inner] * W + xq[~inner])
        b_vals.append(w[~inner])
    cat = np.concatenate
    return (
        index,
        cat(a_rows).astype(np.int64),
        cat(a_cols).astype(np.int64),
        cat(a_vals).astype(np.float64),
        cat(b_rows).astype(np.int64) if b_rows else np.zeros(0, np.int64),
        cat(b_src).astype(np.int64) if b_src else np.zeros(0, np.int64),
        cat(b_vals).astype(np.float64) if b_vals else np.zeros(0),
    )

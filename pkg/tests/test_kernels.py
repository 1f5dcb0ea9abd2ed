import itertools
from fractions import Fraction

import numpy as np
import pytest

from ibo_eval import kernels


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    return kernels.BACKENDS[request.param]


def _wcss(values, weights, labels):
    total = 0.0
    for c in np.unique(labels):
        v, w = values[labels == c], weights[labels == c]
        mu = np.sum(w * v) / np.sum(w)
        total += float(np.sum(w * (v - mu) ** 2))
    return total


def _exact_wcss(values, weights, bounds):
    total = Fraction(0)
    for lo, hi in bounds:
        v = [Fraction(x) for x in values[lo:hi]]
        w = [Fraction(x) for x in weights[lo:hi]]
        mu = sum(a * b for a, b in zip(v, w)) / sum(w)
        total += sum(b * (a - mu) ** 2 for a, b in zip(v, w))
    return total


def _contiguous(n, k):
    for cuts in itertools.combinations(range(1, n), k - 1):
        edges = (0,) + cuts + (n,)
        yield list(zip(edges[:-1], edges[1:]))


def test_lloyd_wcss_never_increases(backend, rng):
    for _ in range(20):
        n = int(rng.integers(5, 60))
        v = np.sort(rng.random(n))
        w = rng.integers(1, 5, n).astype(float)
        init = rng.choice(v, size=4, replace=False)
        labels, cent, hist, n_iter = backend.lloyd_1d(v, w, init, 300)
        assert np.all(np.diff(hist) <= 1e-12)
        assert len(hist) == n_iter
        assert hist[-1] == pytest.approx(_wcss(v, w, np.asarray(labels)), abs=1e-12)


def test_lloyd_reaches_fixpoint(backend):
    v = np.array([0.0, 0.1, 0.5, 0.6, 1.0])
    labels, cent, _, _ = backend.lloyd_1d(v, np.ones(5), np.array([0.1, 0.6]), 300)
    assert list(labels) == [0, 0, 1, 1, 1]
    assert cent == pytest.approx([0.05, 0.7])


def test_dp_matches_contiguous_brute_force(backend, rng):
    for _ in range(40):
        n = int(rng.integers(2, 13))
        k = int(rng.integers(1, min(4, n) + 1))
        # dyadic values and integer weights keep every sum exact in binary
        v = np.unique(rng.integers(0, 64, n)) / 64.0
        n = len(v)
        k = min(k, n)
        w = rng.integers(1, 6, n).astype(float)
        best = min(_exact_wcss(v, w, b) for b in _contiguous(n, k))
        labels, wcss = backend.kmeans1d_dp(v, w, k)
        labels = np.asarray(labels)
        assert np.all(np.diff(labels) >= 0) and labels[0] == 0 and labels[-1] == k - 1
        bounds = [(int(np.argmax(labels == c)), int(n - np.argmax(labels[::-1] == c))) for c in range(k)]
        assert _exact_wcss(v, w, bounds) == best
        assert wcss == pytest.approx(float(best), abs=1e-12)


def _dense_system(backend, mask):
    index, ar, ac, av, br, bs, bv = backend.nli_system(mask)
    n = int(mask.sum())
    A = np.zeros((n, n))
    np.add.at(A, (ar, ac), av)
    B = np.zeros((n, mask.size))
    np.add.at(B, (br, bs), bv)
    return A, B


def test_nli_system_weights(backend):
    mask = np.zeros((5, 6), dtype=bool)
    mask[1:4, 2:4] = True
    mask[0, 0] = True
    A, B = _dense_system(backend, mask)
    assert np.allclose(np.diag(A), 1.0)
    # each row: x_p - sum_q w_q x_q = 0 with weights summing to one
    assert np.allclose(-(A - np.diag(np.diag(A))).sum(1) + B.sum(1), 1.0)
    assert np.all(B >= 0)


def test_backends_agree(rng):
    if len(kernels.BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    py, cy = kernels.BACKENDS["python"], kernels.BACKENDS["cython"]
    v = np.sort(rng.random(200))
    w = rng.random(200) + 0.1
    init = v[[3, 50, 100, 150, 190]]
    a, b = py.lloyd_1d(v, w, init, 300), cy.lloyd_1d(v, w, init, 300)
    assert np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1]) and a[3] == b[3]
    da, db = py.kmeans1d_dp(v, w, 5), cy.kmeans1d_dp(v, w, 5)
    assert np.array_equal(da[0], db[0]) and da[1] == pytest.approx(db[1], rel=1e-12)
    mask = rng.random((12, 9)) < 0.4
    assert np.allclose(_dense_system(py, mask)[0], _dense_system(cy, mask)[0])
    assert np.allclose(_dense_system(py, mask)[1], _dense_system(cy, mask)[1])


def test_selected_backend_is_exported():
    assert kernels.BACKEND in kernels.BACKENDS
    assert kernels.lloyd_1d is kernels.BACKENDS[kernels.BACKEND].lloyd_1d

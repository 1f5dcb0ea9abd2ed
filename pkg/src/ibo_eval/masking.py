"""Heatmap -> significance levels (1-D k-means) -> nested occlusion masks.

Level 1 holds the hottest pixels, level ``k`` the coolest; level-``k``
pixels are never occluded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError


@dataclass
class HeatmapLevels:
    level: np.ndarray          # (H, W) ints in 1..k
    centroids: np.ndarray      # (k,) descending; NaN for empty levels
    k: int
    wcss: float
    meta: dict = field(default_factory=dict)


@dataclass
class MaskSequence:
    step_masks: list
    cumulative_masks: list
    occluded_fraction: tuple
    degenerate: bool = False

    def __len__(self):
        return len(self.step_masks)


def _kmeanspp(values, weights, k, rng):
    centers = [values[rng.choice(len(values), p=weights / weights.sum())]]
    for _ in range(1, k):
        d2 = np.min((values[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        p = weights * d2
        total = p.sum()
        if not np.isfinite(total) or total <= 0:
            # squared gaps can underflow for near-identical values; take any unused value
            p = np.where(d2 > 0, weights, 0.0) if np.any(d2 > 0) else weights.copy()
            total = p.sum()
        centers.append(values[rng.choice(len(values), p=p / total)])
    return np.asarray(centers, dtype=np.float64)


def _wcss(values, weights, labels, k):
    sw = np.bincount(labels, weights=weights, minlength=k)
    swx = np.bincount(labels, weights=weights * values, minlength=k)
    cent = np.divide(swx, sw, out=np.full(k, np.nan), where=sw > 0)
    d = values - cent[labels]
    return float(np.sum(weights * d * d)), cent, sw


def _grayscale_rendering(hm):
    from matplotlib import colormaps

    rgb = colormaps["jet"](hm)[..., :3]
    return rgb @ np.array([0.299, 0.587, 0.114])


def cluster_1d(values, weights, k, seed=0, init=None, max_iter=300, exact=True):
    """Weighted 1-D k-means on distinct ``values`` (ascending).

    Lloyd iterations from k-means++ seeds (or ``init``); with ``exact`` the
    result is replaced by the dynamic-programming optimum whenever that is
    strictly better. Returns ``(labels, centroids, wcss, meta)``.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if init is None:
        init = _kmeanspp(values, weights, k, np.random.default_rng(seed))
    labels, cent, history, n_iter = kernels.lloyd_1d(values, weights, np.asarray(init, np.float64), max_iter)
    labels = np.asarray(labels, dtype=np.int64)
    wcss, cent, _ = _wcss(values, weights, labels, k)
    meta = {"n_iter": int(n_iter), "wcss_history": [float(v) for v in history], "refined": False}
    if exact:
        dp_labels, dp_wcss = kernels.kmeans1d_dp(values, weights, k)
        if dp_wcss < wcss - 1e-12 * max(1.0, wcss):
            labels = np.asarray(dp_labels, dtype=np.int64)
            wcss, cent, _ = _wcss(values, weights, labels, k)
            meta["refined"] = True
    return labels, cent, wcss, meta


def kmeans_levels(hm, k: int = 5, seed: int = 0, init=None, exact: bool = True,
                  max_iter: int = 300, source: str = "heatmap") -> HeatmapLevels:
    """Partition heatmap intensities into ``k`` significance levels.

    ``source="colormap_gray"`` clusters the grayscale of a jet rendering
    instead of the raw values; clusters are then ordered by their mean heat.
    """
    hm = np.asarray(hm, dtype=np.float64)
    if k < 2:
        raise ConfigurationError("k must be at least 2")
    if source not in ("heatmap", "colormap_gray"):
        raise ConfigurationError(f"unknown clustering source {source!r}")
    feat = hm if source == "heatmap" else _grayscale_rendering(hm)
    uniq, inverse, counts = np.unique(feat.ravel(), return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    d = len(uniq)
    meta = {"collapsed": d < k, "n_distinct": int(d), "tie_broken": False}

    if d < k:
        # one cluster per distinct value; top d-1 take levels 1.., lowest goes to k
        labels = np.arange(d)
        meta.update(n_iter=0, wcss_history=[], refined=False)
        heat = _mean_heat(hm.ravel(), inverse, labels, d, uniq, source)
        order = np.argsort(-heat, kind="stable")
        lvl_of = np.empty(d, dtype=np.int64)
        lvl_of[order[:-1]] = np.arange(1, d)
        lvl_of[order[-1]] = k
        centroids = np.full(k, np.nan)
        centroids[lvl_of - 1] = heat
        return HeatmapLevels(lvl_of[inverse].reshape(hm.shape), centroids, k, 0.0, meta)

    labels, cent, wcss, info = cluster_1d(uniq, counts.astype(np.float64), k, seed, init, max_iter, exact)
    meta.update(info)
    heat = _mean_heat(hm.ravel(), inverse, labels, k, cent, source)
    pop = np.bincount(labels, weights=counts, minlength=k)
    # descending heat; equal heat -> larger population is less important
    order = np.lexsort((pop, -np.nan_to_num(heat, nan=-np.inf)))
    if len(set(np.round(heat[~np.isnan(heat)], 15))) < np.count_nonzero(~np.isnan(heat)):
        meta["tie_broken"] = True
    lvl_of = np.empty(k, dtype=np.int64)
    lvl_of[order] = np.arange(1, k + 1)
    centroids = np.empty(k)
    centroids[lvl_of - 1] = heat
    return HeatmapLevels(lvl_of[labels][inverse].reshape(hm.shape), centroids, k, wcss, meta)


def _mean_heat(flat_hm, inverse, labels, k, cent, source):
    if source == "heatmap":
        return np.asarray(cent, dtype=np.float64)
    pix_lab = np.asarray(labels)[inverse]
    s = np.bincount(pix_lab, weights=flat_hm, minlength=k)
    n = np.bincount(pix_lab, minlength=k)
    return np.divide(s, n, out=np.full(k, np.nan), where=n > 0)


def build_masks(levels: HeatmapLevels) -> MaskSequence:
    """Per-level and cumulative masks for levels ``1..k-1``."""
    lv = levels.level
    steps = [(lv == i).astype(np.uint8) for i in range(1, levels.k)]
    cumulative = [(lv <= i).astype(np.uint8) for i in range(1, levels.k)]
    total = int(cumulative[-1].sum())
    if total == 0:
        return MaskSequence([], [], (), degenerate=True)
    frac = tuple(float(c.sum()) / total for c in cumulative)
    return MaskSequence(steps, cumulative, frac)


def important_region(levels: HeatmapLevels) -> np.ndarray:
    """Binary map of every pixel outside the least-significant level."""
    return (levels.level < levels.k).astype(np.uint8)


def threshold_region(hm, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(hm) >= threshold).astype(np.uint8)

"""Evaluation metrics: LPIPS, occlusion curves and their AUC, IoU, rankings, MARD."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, DataError

# --------------------------------------------------------------------------
# LPIPS

# input scaling used by the reference LPIPS implementation
_LPIPS_SHIFT = torch.tensor([-0.030, -0.088, -0.188]).view(1, 3, 1, 1)
_LPIPS_SCALE = torch.tensor([0.458, 0.448, 0.450]).view(1, 3, 1, 1)


class PerceptualExtractor(nn.Module):
    """Frozen feature stages plus non-negative per-channel weights.

    ``stages`` are applied in sequence; the output of each is one tapped
    layer. ``weights[l]`` has one entry per channel of layer ``l``.
    """

    def __init__(self, stages: Sequence[nn.Module], weights: Sequence[torch.Tensor], lpips_scaling: bool = True):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        if len(weights) != len(stages):
            raise ConfigurationError("need one weight vector per layer")
        ws = [torch.as_tensor(w, dtype=torch.float32).flatten() for w in weights]
        if any(bool((w < 0).any()) for w in ws):
            raise ConfigurationError("LPIPS layer weights must be non-negative")
        for i, w in enumerate(ws):
            self.register_buffer(f"w{i}", w)
        self.lpips_scaling = lpips_scaling
        self.requires_grad_(False)
        self.eval()

    @property
    def weights(self):
        return [getattr(self, f"w{i}") for i in range(len(self.stages))]

    def features(self, x: torch.Tensor):
        if self.lpips_scaling:
            x = ((x * 2.0 - 1.0) - _LPIPS_SHIFT.to(x.dtype)) / _LPIPS_SCALE.to(x.dtype)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


def identity_extractor(channels: int = 3) -> PerceptualExtractor:
    """One layer whose features are the raw pixels, unit weights."""
    return PerceptualExtractor([nn.Identity()], [torch.ones(channels)], lpips_scaling=False)


def alexnet_extractor(weights_path=None, lin_path=None, seed: int = 0) -> PerceptualExtractor:
    """AlexNet conv stages tapped after relu1..relu5.

    ``weights_path``: torchvision AlexNet state dict; without it the network
    is randomly initialised from ``seed``. ``lin_path``: LPIPS linear-layer
    weights (``lin{l}.model.1.weight`` entries); default all ones.
    """
    from torchvision.models import alexnet

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = alexnet(weights=None)
    if weights_path is not None:
        net.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
    f = net.features
    stages = [f[0:2], f[2:5], f[5:8], f[8:10], f[10:12]]
    chans = [64, 192, 384, 256, 256]
    if lin_path is not None:
        sd = torch.load(lin_path, map_location="cpu", weights_only=True)
        weights = [sd[f"lin{i}.model.1.weight"].flatten() for i in range(5)]
    else:
        weights = [torch.ones(c) for c in chans]
    return PerceptualExtractor(stages, weights)


def _to_batch(img) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()


def _unit(f, eps=1e-10):
    return f / (torch.sqrt((f * f).sum(dim=1, keepdim=True)) + eps)


@torch.no_grad()
def lpips_batch(xs, ys, ex: PerceptualExtractor) -> np.ndarray:
    x, y = _to_batch(xs), _to_batch(ys)
    if x.shape != y.shape:
        raise DataError(f"LPIPS inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    fx, fy = ex.features(x), ex.features(y)
    total = torch.zeros(x.shape[0], dtype=torch.float64)
    for a, b, w in zip(fx, fy, ex.weights):
        d = (_unit(a.double()) - _unit(b.double())) ** 2
        total += (d * w.double().view(1, -1, 1, 1)).sum(1).mean(dim=(1, 2))
    return total.numpy()


def lpips(x, y, ex: PerceptualExtractor) -> float:
    """Per layer: unit-normalize channels, weighted squared difference, spatial mean; summed."""
    if np.shape(x) != np.shape(y):
        raise DataError(f"LPIPS inputs differ in shape: {np.shape(x)} vs {np.shape(y)}")
    if np.array_equal(x, y):
        return 0.0
    return float(lpips_batch(x, y, ex)[0])


# --------------------------------------------------------------------------
# occlusion curves


@dataclass
class OcclusionCurve:
    p: tuple
    f: tuple
    explainer: str = ""
    strategy: str = ""
    sample_id: str = ""

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if len(self.p) != len(self.f) or len(self.p) < 2:
            raise DataError("curve needs matching p and f with at least two points")
        if p[0] != 0.0 or p[-1] != 1.0:
            raise DataError("curve abscissa must start at 0 and end at 1")
        if np.any(np.diff(p) < 0):
            raise DataError("curve abscissa must be non-decreasing")


def auc(curve: OcclusionCurve) -> float:
    """Trapezoidal area under f(p)."""
    p, f = curve.p, curve.f
    return math.fsum((p[i + 1] - p[i]) * (f[i] + f[i + 1]) / 2.0 for i in range(len(p) - 1))


def curve_from_predictions(fractions, probs, step_index=False, **labels) -> OcclusionCurve:
    """Build a curve from the original probability plus one per occlusion step.

    ``fractions`` are cumulative occluded fractions per step; with
    ``step_index`` the abscissa is the uniform grid i/n instead.
    """
    n = len(fractions)
    if len(probs) != n + 1:
        raise DataError("need one probability for the original and one per step")
    p = [i / n for i in range(n + 1)] if step_index else [0.0] + [float(v) for v in fractions]
    return OcclusionCurve(tuple(p), tuple(float(v) for v in probs), **labels)


def occlusion_curve(image, heatmap, spec, classifier, k: int = 5, seed: int = 0, step_index=False,
                    sample_id="", explainer="", cluster_source="heatmap") -> Optional[OcclusionCurve]:
    """Cluster ``heatmap``, occlude ``image`` step by step and re-predict.

    Returns None when the heatmap yields no occludable region.
    """
    from .classifier import predict_batch
    from .masking import build_masks, kmeans_levels
    from .occlusion import apply_iteratively

    seq = build_masks(kmeans_levels(heatmap, k=k, seed=seed, source=cluster_source))
    if seq.degenerate:
        return None
    steps = apply_iteratively(image, seq, spec)
    probs = predict_batch(classifier, np.stack([image] + [s.image for s in steps]))
    return curve_from_predictions(seq.occluded_fraction, probs, step_index, explainer=explainer,
                                  strategy=spec.kind, sample_id=sample_id)


# --------------------------------------------------------------------------
# IoU


def iou(ht, gt, return_info=False):
    a = np.asarray(ht).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise DataError(f"IoU masks differ in shape: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    empty = union == 0
    value = 1.0 if empty else np.count_nonzero(a & b) / union
    return (value, {"empty_union": empty}) if return_info else value


# --------------------------------------------------------------------------
# rankings


@dataclass
class RankingTable:
    methods: tuple
    scores: dict
    ranks: dict
    provenance: str = ""
    ties: list = field(default_factory=list)

    def order(self):
        return sorted(self.methods, key=lambda m: self.ranks[m])


def rank_methods(scores: dict, direction: str, provenance: str = "") -> RankingTable:
    """Rank 1 = best. ``direction`` is ``"descending"`` (higher is better, IoU)
    or ``"ascending"`` (lower is better, AUC). Equal scores are ordered by
    method name and reported in ``ties``.
    """
    if direction not in ("ascending", "descending"):
        raise ConfigurationError("direction must be 'ascending' or 'descending'")
    if len(scores) < 2:
        raise ConfigurationError("ranking needs at least two methods")
    if any(isinstance(v, float) and math.isnan(v) for v in scores.values()):
        raise DataError("cannot rank NaN scores")
    sign = 1 if direction == "ascending" else -1
    order = sorted(scores, key=lambda m: (sign * scores[m], m))
    ranks = {m: i + 1 for i, m in enumerate(order)}
    groups = {}
    for m in order:
        groups.setdefault(scores[m], []).append(m)
    ties = [g for g in groups.values() if len(g) > 1]
    return RankingTable(tuple(order), dict(scores), ranks, provenance, ties)


def _check_same(gt: RankingTable, oc: RankingTable):
    if set(gt.methods) != set(oc.methods):
        raise DataError("rankings cover different method sets")


def mard(gt: RankingTable, oc: RankingTable) -> Fraction:
    """Mean absolute rank difference, exact."""
    _check_same(gt, oc)
    return Fraction(sum(abs(gt.ranks[m] - oc.ranks[m]) for m in gt.methods), len(gt.methods))


def rank_precision(gt: RankingTable, oc: RankingTable) -> Fraction:
    """Fraction of methods placed at the same rank in both tables."""
    _check_same(gt, oc)
    return Fraction(sum(gt.ranks[m] == oc.ranks[m] for m in gt.methods), len(gt.methods))


def load_reference_tables() -> dict:
    """Published IoU/AUC/LPIPS tables shipped with the package."""
    text = resources.files("ibo_eval").joinpath("fixtures/reference_tables.json").read_text()
    return json.loads(text)


def replay_reference_tables(tables: Optional[dict] = None) -> dict:
    """Rank the reference score tables and compare each strategy with the IoU ranking."""
    tables = tables or load_reference_tables()
    gt = rank_methods(tables["iou"], "descending", "iou-ground-truth")
    out = {}
    for strategy, scores in tables["auc"].items():
        oc = rank_methods(scores, "ascending", f"auc:{strategy}")
        out[strategy] = {"ranking": oc, "mard": mard(gt, oc), "rank_precision": rank_precision(gt, oc)}
    return {"ground_truth": gt, "strategies": out}

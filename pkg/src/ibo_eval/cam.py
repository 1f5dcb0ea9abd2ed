"""CAM-family saliency maps behind a single ``explain`` call.

Every method returns an (H, W) map in [0, 1] at image resolution: raw map
at the target layer's resolution -> ReLU -> bilinear upsampling -> min-max
normalization (constant maps become all zeros).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .classifier import TUMOR, ClassifierModel
from .errors import ConfigurationError

METHODS = ("grad-cam", "grad-cam++", "xgrad-cam", "ablation-cam", "eigen-cam", "score-cam", "full-grad")
GRADIENT_METHODS = ("grad-cam", "grad-cam++", "xgrad-cam")
_EPS = 1e-7


@dataclass
class ExplainerSpec:
    method: str
    target_layer: Optional[str] = None
    target_class: int = TUMOR
    batch_size: int = 64

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown CAM method {self.method!r}; expected one of {METHODS}")


@dataclass
class Heatmap:
    values: np.ndarray
    method: str
    target_class: int
    layer: Optional[str] = None
    meta: dict = field(default_factory=dict)


class ExplainerError(RuntimeError):
    def __init__(self, method, cause):
        super().__init__(f"{method}: {cause}")
        self.method = method


def normalize_map(cam: np.ndarray) -> np.ndarray:
    cam = np.asarray(cam, dtype=np.float64)
    lo, hi = cam.min(), cam.max()
    if not np.isfinite(lo) or not np.isfinite(hi) or hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def _upsample(cam: torch.Tensor, size) -> np.ndarray:
    up = F.interpolate(cam[None, None].double(), size=size, mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def _finish(raw: torch.Tensor, size) -> np.ndarray:
    return normalize_map(_upsample(torch.relu(raw.detach()), size))


class _Capture:
    """Forward pass that records the target layer's output (and optionally its gradient)."""

    def __init__(self, model: ClassifierModel, layer_name: str):
        self.model = model
        self.layer = model.layer(layer_name)

    def run(self, x, target_class, with_grad=True):
        store = {}

        def hook(_mod, _inp, out):
            store["act"] = out

        handle = self.layer.register_forward_hook(hook)
        try:
            with torch.enable_grad() if with_grad else torch.no_grad():
                logits = self.model.net(x)
                act = store["act"]
                if act.ndim != 4:
                    raise ConfigurationError("target layer has no spatial extent")
                grad = None
                if with_grad:
                    grad, = torch.autograd.grad(logits[:, target_class].sum(), act)
        finally:
            handle.remove()
        return logits.detach(), act.detach(), grad


def _gradcam(act, grad):
    w = grad.mean(dim=(2, 3))
    return (w[:, :, None, None] * act).sum(1)[0]


def _gradcampp(act, grad):
    g2, g3 = grad ** 2, grad ** 3
    sum_a = act.sum(dim=(2, 3), keepdim=True)
    denom = 2 * g2 + sum_a * g3
    aij = torch.where(grad != 0, g2 / torch.where(denom != 0, denom, torch.full_like(denom, _EPS)),
                      torch.zeros_like(grad))
    w = (aij * torch.relu(grad)).sum(dim=(2, 3))
    return (w[:, :, None, None] * act).sum(1)[0]


def _xgradcam(act, grad):
    sum_a = act.sum(dim=(2, 3), keepdim=True)
    w = (grad * act / (sum_a + _EPS)).sum(dim=(2, 3))
    return (w[:, :, None, None] * act).sum(1)[0]


def _eigencam(act):
    a = act[0].double()
    c, h, w = a.shape
    mat = a.reshape(c, h * w).T
    if not torch.any(mat != 0):
        return torch.zeros(h, w, dtype=torch.float64)
    _, _, vh = torch.linalg.svd(mat, full_matrices=False)
    return (mat @ vh[0]).abs().reshape(h, w)


def _ablationcam(model, layer, x, act, target_class, batch_size):
    c = act.shape[1]
    with torch.no_grad():
        base = model.net(x)[0, target_class]
        scores = []
        for start in range(0, c, batch_size):
            chans = list(range(start, min(c, start + batch_size)))

            def hook(_mod, _inp, out, chans=chans):
                out = out.clone()
                for i, ch in enumerate(chans):
                    out[i, ch] = 0
                return out

            handle = layer.register_forward_hook(hook)
            try:
                scores.append(model.net(x.expand(len(chans), -1, -1, -1))[:, target_class])
            finally:
                handle.remove()
        ablated = torch.cat(scores)
    denom = base if abs(float(base)) > _EPS else torch.tensor(_EPS)
    w = (base - ablated) / denom
    return (w[:, None, None] * act[0]).sum(0)


def _scorecam(model, x, act, target_class, batch_size):
    size = x.shape[-2:]
    with torch.no_grad():
        up = F.interpolate(act, size=size, mode="bilinear", align_corners=False)[0]
        lo = up.amin(dim=(1, 2), keepdim=True)
        hi = up.amax(dim=(1, 2), keepdim=True)
        masks = torch.where(hi > lo, (up - lo) / (hi - lo + _EPS), torch.zeros_like(up))
        baseline = torch.softmax(model.net(torch.zeros_like(x)), dim=1)[0, target_class]
        probs = []
        for start in range(0, masks.shape[0], batch_size):
            m = masks[start:start + batch_size, None]
            probs.append(torch.softmax(model.net(x * m), dim=1)[:, target_class])
        w = torch.cat(probs) - baseline
    return (w[:, None, None] * act[0]).sum(0)


def _fullgrad(model: ClassifierModel, x, target_class):
    size = x.shape[-2:]
    convs = [m for m in model.net.modules() if isinstance(m, nn.Conv2d) and m.bias is not None]
    outs = []
    handles = [m.register_forward_hook(lambda _m, _i, o: outs.append(o)) for m in convs]
    try:
        with torch.enable_grad():
            xi = x.clone().requires_grad_(True)
            logits = model.net(xi)
            grads = torch.autograd.grad(logits[0, target_class], [xi] + outs)
    finally:
        for h in handles:
            h.remove()
    total = normalize_map(_upsample((grads[0] * xi).detach().abs().sum(1)[0], size))
    for conv, g in zip(convs, grads[1:]):
        bias_term = (g[0] * conv.bias[:, None, None]).detach().abs().sum(0)
        total = total + normalize_map(_upsample(bias_term, size))
    return total


def explain(model: ClassifierModel, img, spec: ExplainerSpec, _cache: Optional[dict] = None) -> Heatmap:
    """Saliency heatmap of ``img`` for ``spec.target_class``."""
    layer_name = spec.target_layer or model.target_layer
    x = model.to_tensor(img)
    size = tuple(np.asarray(img).shape[:2])
    cap = _Capture(model, layer_name)
    method = spec.method
    if method in GRADIENT_METHODS:
        key = ("grad", layer_name, spec.target_class)
        if _cache is not None and key in _cache:
            act, grad = _cache[key]
        else:
            _, act, grad = cap.run(x, spec.target_class, with_grad=True)
            if _cache is not None:
                _cache[key] = (act, grad)
        fn = {"grad-cam": _gradcam, "grad-cam++": _gradcampp, "xgrad-cam": _xgradcam}[method]
        values = _finish(fn(act, grad), size)
    elif method == "full-grad":
        values = normalize_map(_fullgrad(model, x, spec.target_class))
    else:
        key = ("act", layer_name)
        if _cache is not None and key in _cache:
            act = _cache[key]
        else:
            _, act, _ = cap.run(x, spec.target_class, with_grad=False)
            if _cache is not None:
                _cache[key] = act
        if method == "eigen-cam":
            raw = _eigencam(act)
        elif method == "ablation-cam":
            raw = _ablationcam(model, cap.layer, x, act, spec.target_class, spec.batch_size)
        else:
            raw = _scorecam(model, x, act, spec.target_class, spec.batch_size)
        values = _finish(raw, size)
    return Heatmap(values, method, spec.target_class, None if method == "full-grad" else layer_name)


def explain_all(model: ClassifierModel, img, specs) -> dict:
    """Run several explainers, sharing one forward/backward pass where possible."""
    cache = {}
    out = {}
    for spec in specs:
        try:
            out[spec.method] = explain(model, img, spec, _cache=cache)
        except Exception as exc:
            raise ExplainerError(spec.method, exc) from exc
    return out


# reference heatmaps used as sanity anchors in experiments

def oracle_heatmap(gt_mask) -> np.ndarray:
    """The ground-truth tumor mask itself, as a heatmap."""
    return np.asarray(gt_mask, dtype=np.float64).clip(0, 1)


def random_heatmap(shape, seed: int, cells: int = 8) -> np.ndarray:
    """Seeded uniform noise on a coarse grid, upsampled bilinearly like a CAM."""
    rng = np.random.default_rng(seed)
    coarse = torch.from_numpy(rng.random((cells, cells)))
    return normalize_map(_upsample(coarse, tuple(shape)))

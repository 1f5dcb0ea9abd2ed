"""Occlusion operators: each maps (image, mask) to an occluded image.

``mask`` uses 1 for pixels to replace. Pixels outside the mask are copied
from the input unchanged by every operator.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import splu

from . import kernels
from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

STRATEGIES = ("blackening", "histogram", "mean", "nli", "blurring", "ibo")


class OcclusionStepError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"occlusion failed at step {step}: {cause}")
        self.step = step


def _prepare(img, mask):
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask)
    if img.ndim != 3 or mask.shape != img.shape[:2]:
        raise DataError(f"mask shape {mask.shape} does not match image {img.shape}")
    return img, mask.astype(bool)


def occlude_blackening(img, mask):
    img, m = _prepare(img, mask)
    return img * (1.0 - m[..., None])


def occlude_blurring(img, mask, sigma):
    if sigma <= 0:
        raise ConfigurationError("blur sigma must be positive")
    img, m = _prepare(img, mask)
    out = img.copy()
    if not m.any():
        return out
    blurred = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    out[m] = blurred[m]
    return out


def occlude_mean(img, mask, dataset_mean):
    img, m = _prepare(img, mask)
    out = img.copy()
    out[m] = np.asarray(dataset_mean, dtype=np.float64)
    return out


def occlude_histogram(img, mask, seed, full_image=False, return_info=False):
    """Fill masked pixels with i.i.d. draws of the same channel's values.

    Draws come from the unmasked pixels unless ``full_image``; a mask that
    covers everything falls back to the whole image.
    """
    img, m = _prepare(img, mask)
    out = img.copy()
    n = int(m.sum())
    fallback = not full_image and n == m.size
    if n:
        rng = np.random.default_rng(seed)
        source = np.ones_like(m) if (full_image or fallback) else ~m
        for c in range(img.shape[2]):
            pool = img[..., c][source]
            out[..., c][m] = pool[rng.integers(0, pool.size, n)]
    if return_info:
        return out, {"full_image_fallback": fallback}
    return out


def occlude_nli(img, mask, nli_sigma=0.1, seed=0, return_info=False):
    """Noisy linear imputation by 8-neighbour harmonic interpolation.

    Masked pixels solve x_p = weighted mean of their neighbours (axis
    weight 1, diagonal 1/sqrt(2)) with observed neighbours held fixed;
    Gaussian noise of std ``nli_sigma`` is added and the result clipped.
    """
    img, m = _prepare(img, mask)
    out = img.copy()
    info = {"no_boundary_fill": False}
    if not m.any():
        return (out, info) if return_info else out
    H, W, C = img.shape
    if m.all():
        fill = np.broadcast_to(img.reshape(-1, C).mean(axis=0), (m.sum(), C))
        info["no_boundary_fill"] = True
    else:
        index, ar, ac, av, br, bs, bv = kernels.nli_system(m)
        n = int(m.sum())
        A = sparse.csc_matrix((av, (ar, ac)), shape=(n, n))
        Bm = sparse.csr_matrix((bv, (br, bs)), shape=(n, H * W))
        rhs = Bm @ img.reshape(H * W, C)
        sol = splu(A).solve(np.ascontiguousarray(rhs))
        # solution rows follow raster order of the masked pixels, as does img[m]
        fill = sol
    fill = np.array(fill, dtype=np.float64)
    if nli_sigma > 0:
        fill = fill + np.random.default_rng(seed).normal(0.0, nli_sigma, fill.shape)
    out[m] = np.clip(fill, 0.0, 1.0)
    return (out, info) if return_info else out


def occlude_ibo(img, mask, inpainter, seed=None):
    """Inpaint the masked region with a diffusion model (``inpainter.inpaint``)."""
    img, m = _prepare(img, mask)
    if not m.any():
        return img.copy()
    return inpainter.inpaint(img, m.astype(np.uint8), seed=seed)


@dataclass
class StrategySpec:
    kind: str
    blur_sigma: Optional[float] = None
    dataset_mean: Optional[tuple] = None
    nli_sigma: float = 0.1
    rng_seed: int = 0
    histogram_full_image: bool = False
    ibo: Any = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigurationError(f"unknown occlusion strategy {self.kind!r}")
        if self.kind == "blurring" and (self.blur_sigma is None or self.blur_sigma <= 0):
            raise ConfigurationError("blurring needs blur_sigma > 0")
        if self.kind == "mean" and self.dataset_mean is None:
            raise ConfigurationError("mean occlusion needs the training-set mean")
        if self.kind == "nli" and self.nli_sigma < 0:
            raise ConfigurationError("nli_sigma must be >= 0")
        if self.kind == "ibo" and self.ibo is None:
            raise ConfigurationError("ibo occlusion needs an inpainter")


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def occlude(img, mask, spec: StrategySpec, step: int = 0):
    seed = step_seed(spec.rng_seed, step)
    if spec.kind == "blackening":
        return occlude_blackening(img, mask)
    if spec.kind == "blurring":
        return occlude_blurring(img, mask, spec.blur_sigma)
    if spec.kind == "mean":
        return occlude_mean(img, mask, spec.dataset_mean)
    if spec.kind == "histogram":
        return occlude_histogram(img, mask, seed, spec.histogram_full_image)
    if spec.kind == "nli":
        return occlude_nli(img, mask, spec.nli_sigma, seed)
    return occlude_ibo(img, mask, spec.ibo, seed)


@dataclass
class OccludedImage:
    image: np.ndarray
    strategy: StrategySpec
    mask: np.ndarray
    provenance: dict


def apply_iteratively(img, seq, spec: StrategySpec, provenance: Optional[dict] = None):
    """Occlude level by level, feeding each step's output into the next."""
    if seq.degenerate:
        raise DataError("degenerate mask sequence; nothing to occlude")
    results = []
    current = np.asarray(img, dtype=np.float64)
    for i, step_mask in enumerate(seq.step_masks, start=1):
        try:
            current = occlude(current, step_mask, spec, step=i)
        except Exception as exc:
            raise OcclusionStepError(i, exc) from exc
        prov = dict(provenance or {}, step=i)
        results.append(OccludedImage(current, spec, seq.cumulative_masks[i - 1], prov))
    return results


def apply_batch_ibo(images, seqs, spec: StrategySpec, sample_seeds=None):
    """Sequential IBO for many images at once; inpainting runs batched per step.

    Each image draws its noise from its own stream seeded by
    ``sample_seeds[j]`` (default ``rng_seed + j``) and the step index.
    Returns one list of step images per input.
    """
    if spec.kind != "ibo":
        raise ConfigurationError("apply_batch_ibo only handles the ibo strategy")
    if sample_seeds is None:
        sample_seeds = [spec.rng_seed + j for j in range(len(images))]
    current = [np.asarray(im, dtype=np.float64) for im in images]
    out = [[] for _ in images]
    n_steps = max(len(s) for s in seqs) if seqs else 0
    for i in range(1, n_steps + 1):
        masks = [s.step_masks[i - 1] for s in seqs]
        seeds = [step_seed(s, i) for s in sample_seeds]
        current = spec.ibo.inpaint_batch(current, masks, seeds=seeds)
        for j, im in enumerate(current):
            out[j].append(im)
    return out

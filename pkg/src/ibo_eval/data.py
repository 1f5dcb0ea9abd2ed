"""Patch corpus: loading, Reinhard stain normalization, synthetic generation.

Images are float arrays of shape (H, W, 3) in [0, 1]; masks are (H, W)
arrays of {0, 1} with 1 marking tumor.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage import color

from . import io
from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LABELS = ("normal", "tumor")


@dataclass(frozen=True)
class LabeledPatch:
    id: str
    label: str
    image: np.ndarray
    gt_mask: Optional[np.ndarray] = None

    @property
    def is_tumor(self) -> bool:
        return self.label == "tumor"


@dataclass(frozen=True)
class StainReference:
    """Per-channel mean and std in CIELAB."""

    mean: tuple
    std: tuple

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigurationError("stain reference needs 3 means and 3 stds")
        if any(s <= 0 for s in self.std):
            raise ConfigurationError("stain reference stds must be positive")

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mean"]), tuple(d["std"]))


def _check_rgb(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an RGB image of shape (H, W, 3), got {img.shape}")
    return img


def _to_lab(img):
    return color.rgb2lab(img)


def _from_lab(lab):
    with warnings.catch_warnings():
        # out-of-gamut values are clipped by skimage; we report that ourselves
        warnings.simplefilter("ignore")
        return color.lab2rgb(lab)


def stain_normalize(img, ref: StainReference, return_info: bool = False):
    """Reinhard color transfer: match per-channel Lab mean/std to ``ref``.

    A channel with zero variance has its std taken as 1, which maps it to
    the reference mean. With ``return_info`` the result is ``(image, info)``
    where info holds the Lab array before conversion back (``lab``), the
    list of ``degenerate_channels`` and whether RGB ``clipped``.
    """
    img = _check_rgb(img)
    lab = _to_lab(img)
    mu = lab.reshape(-1, 3).mean(axis=0)
    sd = lab.reshape(-1, 3).std(axis=0)
    degenerate = [int(c) for c in np.nonzero(sd <= 1e-12)[0]]
    sd = np.where(sd <= 1e-12, 1.0, sd)
    target = (lab - mu) / sd * np.asarray(ref.std) + np.asarray(ref.mean)
    out = np.clip(_from_lab(target), 0.0, 1.0)
    if not return_info:
        return out
    clipped = bool(np.abs(_to_lab(out) - target).max() > 1e-6)
    return out, {"lab": target, "degenerate_channels": degenerate, "clipped": clipped}


def compute_stain_reference(corpus: Sequence[np.ndarray]) -> StainReference:
    """Pooled Lab statistics over every pixel of every image."""
    if len(corpus) == 0:
        raise ConfigurationError("cannot compute a stain reference from an empty corpus")
    labs = [_to_lab(_check_rgb(img)).reshape(-1, 3) for img in corpus]
    n = sum(lab.shape[0] for lab in labs)
    mean = sum(lab.sum(axis=0) for lab in labs) / n
    # two passes: centred sums avoid cancellation on near-constant corpora
    var = sum(((lab - mean) ** 2).sum(axis=0) for lab in labs) / n
    std = np.sqrt(var)
    if np.any(std <= 1e-6):
        warnings.warn("stain reference has zero-variance channels; using std=1 for them")
        std = np.where(std <= 1e-6, 1.0, std)
    return StainReference(tuple(mean.tolist()), tuple(std.tolist()))


# --------------------------------------------------------------------------
# corpus on disk


def save_patch(root, split: str, patch: LabeledPatch):
    root = Path(root)
    io.write_image(root / split / patch.label / f"{patch.id}.png", patch.image)
    if patch.gt_mask is not None:
        io.write_mask(root / split / "masks" / f"{patch.id}.png", patch.gt_mask)


def load_corpus(root, split: str) -> list[LabeledPatch]:
    """Load ``<root>/<split>/{tumor,normal}/<id>.png`` with optional masks."""
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise ConfigurationError(f"split directory not found: {split_dir}")
    patches = []
    for label in LABELS:
        label_dir = split_dir / label
        if not label_dir.is_dir():
            continue
        for path in label_dir.glob("*.png"):
            pid = path.stem
            image = io.read_image(path)
            mask_path = split_dir / "masks" / f"{pid}.png"
            gt = None
            if mask_path.exists():
                gt = io.read_mask(mask_path)
                if gt.shape != image.shape[:2]:
                    raise DataError(
                        f"patch {pid}: mask shape {gt.shape} does not match image {image.shape[:2]}")
                if label == "normal" and gt.any():
                    raise DataError(f"patch {pid}: normal patch with a nonempty tumor mask")
            patches.append(LabeledPatch(pid, label, image, gt))
    patches.sort(key=lambda p: p.id)
    ids = [p.id for p in patches]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate patch ids in {split_dir}")
    return patches


# --------------------------------------------------------------------------
# synthetic corpus

_NORMAL_BASE = np.array([0.90, 0.64, 0.78])
_TUMOR_BASE = np.array([0.52, 0.30, 0.64])
_NUCLEUS = np.array([0.22, 0.09, 0.38])


def _unit_field(rng, size, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _normal_tissue(rng, size):
    lum = 0.05 * _unit_field(rng, size, size / 10) + 0.025 * _unit_field(rng, size, 1.5)
    eosin = 0.03 * _unit_field(rng, size, size / 8)
    img = _NORMAL_BASE + lum[..., None] + eosin[..., None] * np.array([0.3, -1.0, 0.2])
    return img


def _tumor_texture(rng, size):
    nuclei = ndimage.gaussian_filter(rng.standard_normal((size, size)), 0.8, mode="wrap")
    dots = nuclei > np.quantile(nuclei, 0.6)
    img = np.where(dots[..., None], _NUCLEUS, _TUMOR_BASE)
    return img + 0.03 * rng.standard_normal((size, size, 1))


def _blob_mask(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    while True:
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.2, 0.8, 2) * size
            a, b = rng.uniform(0.08, 0.22, 2) * size
            th = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(th) + dy * np.sin(th)
            v = -dx * np.sin(th) + dy * np.cos(th)
            mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
        frac = mask.mean()
        if 0.02 <= frac <= 0.40:
            return mask


def _stain_jitter(rng):
    return rng.normal(1.0, 0.03, 3), rng.normal(0.0, 0.015, 3)


def synth_normal(rng, size):
    gain, offset = _stain_jitter(rng)
    return io.to_uint8(_normal_tissue(rng, size) * gain + offset) / 255.0


def synth_tumor(rng, size):
    """Return (image, background, mask); image equals background off the mask."""
    gain, offset = _stain_jitter(rng)
    bg = io.to_uint8(_normal_tissue(rng, size) * gain + offset)
    tex = io.to_uint8(_tumor_texture(rng, size) * gain + offset)
    mask = _blob_mask(rng, size)
    same = np.all(tex == bg, axis=-1) & mask
    if same.any():  # keep blob pixels distinguishable from the background
        tex[same] = np.where(bg[same] > 127, bg[same] - 1, bg[same] + 1)
    img = np.where(mask[..., None], tex, bg)
    return img / 255.0, bg / 255.0, mask.astype(np.uint8)


def generate_synthetic_corpus(root, seed: int, n_normal: int, n_tumor: int, size: int = 64,
                              splits: Sequence[str] = SPLITS):
    """Write a reproducible toy corpus with ``n_normal``/``n_tumor`` patches per split."""
    if size < 16:
        raise ConfigurationError("synthetic patches need size >= 16")
    if n_normal < 0 or n_tumor < 0:
        raise ConfigurationError("patch counts must be non-negative")
    root = Path(root)
    for s_idx, split in enumerate(splits):
        (root / split).mkdir(parents=True, exist_ok=True)
        for i in range(n_normal):
            rng = np.random.default_rng([seed, s_idx, 0, i])
            save_patch(root, split, LabeledPatch(f"normal_{i:04d}", "normal", synth_normal(rng, size)))
        for i in range(n_tumor):
            rng = np.random.default_rng([seed, s_idx, 1, i])
            img, _, mask = synth_tumor(rng, size)
            save_patch(root, split, LabeledPatch(f"tumor_{i:04d}", "tumor", img, mask))
    io.write_json(root / "corpus.json", {
        "seed": seed, "n_normal": n_normal, "n_tumor": n_tumor, "size": size, "splits": list(splits),
    })
    return root

import hashlib
import warnings

import numpy as np
import pytest
from skimage import color

from ibo_eval import io
from ibo_eval.data import (LabeledPatch, StainReference, compute_stain_reference, generate_synthetic_corpus,
                           load_corpus, save_patch, stain_normalize, synth_normal, synth_tumor)
from ibo_eval.errors import ConfigurationError, DataError


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _patches(n, size=24, seed=0):
    return [synth_normal(np.random.default_rng([seed, i]), size) for i in range(n)]


# loading


def test_load_counts(tmp_path):
    root = generate_synthetic_corpus(tmp_path, seed=1, n_normal=10, n_tumor=10, size=16, splits=("train",))
    patches = load_corpus(root, "train")
    assert len(patches) == 20
    assert sum(p.gt_mask is not None for p in patches) == 10
    assert [p.id for p in patches] == sorted(p.id for p in patches)
    assert all((p.gt_mask is not None) == p.is_tumor for p in patches)


def test_empty_and_missing_split(tmp_path):
    (tmp_path / "val").mkdir()
    assert load_corpus(tmp_path, "val") == []
    with pytest.raises(ConfigurationError):
        load_corpus(tmp_path, "test")


def test_mask_shape_mismatch_names_patch(tmp_path):
    io.write_image(tmp_path / "train" / "tumor" / "t_17.png", np.zeros((64, 64, 3)))
    io.write_mask(tmp_path / "train" / "masks" / "t_17.png", np.ones((32, 32)))
    with pytest.raises(DataError, match="t_17"):
        load_corpus(tmp_path, "train")


def test_persist_roundtrip(tmp_path):
    img, _, mask = synth_tumor(np.random.default_rng(0), 20)
    p = LabeledPatch("tumor_x", "tumor", img, mask)
    save_patch(tmp_path, "test", p)
    (q,) = load_corpus(tmp_path, "test")
    assert q.id == p.id and q.label == p.label
    assert np.array_equal(q.image, p.image) and np.array_equal(q.gt_mask, p.gt_mask)


# synthetic generator


def test_generator_is_byte_deterministic(tmp_path):
    a = generate_synthetic_corpus(tmp_path / "a", seed=7, n_normal=4, n_tumor=4, size=64)
    b = generate_synthetic_corpus(tmp_path / "b", seed=7, n_normal=4, n_tumor=4, size=64)
    assert _tree_digest(a) == _tree_digest(b)


def test_no_tumors_no_masks(tmp_path):
    root = generate_synthetic_corpus(tmp_path, seed=7, n_normal=3, n_tumor=0, size=16)
    assert not list(root.rglob("masks/*.png"))


def test_tumor_geometry():
    for i in range(30):
        img, bg, mask = synth_tumor(np.random.default_rng([5, i]), 64)
        assert 0.02 <= mask.mean() <= 0.40
        differs = np.any(img != bg, axis=-1)
        assert np.array_equal(differs, mask.astype(bool))


def test_generator_preconditions(tmp_path):
    with pytest.raises(ConfigurationError):
        generate_synthetic_corpus(tmp_path, 0, 1, 1, size=8)
    with pytest.raises(ConfigurationError):
        generate_synthetic_corpus(tmp_path, 0, -1, 1)


# stain normalization


def test_self_reference_identity():
    img = _patches(1)[0]
    ref = compute_stain_reference([img])
    assert np.abs(stain_normalize(img, ref) - img).max() < 1e-6


def test_constant_image_maps_to_reference_mean():
    ref_rgb = np.array([0.8, 0.5, 0.7])
    lab = color.rgb2lab(ref_rgb[None, None])[0, 0]
    ref = StainReference(tuple(lab), (5.0, 4.0, 3.0))
    out, info = stain_normalize(np.full((6, 6, 3), 0.5), ref, return_info=True)
    assert info["degenerate_channels"] == [0, 1, 2]
    assert np.allclose(out, ref_rgb, atol=1e-6)


def test_output_statistics_match_reference(rng):
    ref = StainReference((60.0, 25.0, -15.0), (12.0, 6.0, 9.0))
    for _ in range(5):
        img = rng.random((20, 20, 3))
        out, info = stain_normalize(img, ref, return_info=True)
        lab = info["lab"].reshape(-1, 3)
        assert np.allclose(lab.mean(0), ref.mean, atol=1e-3)
        assert np.allclose(lab.std(0), ref.std, atol=1e-3)
        assert out.min() >= 0 and out.max() <= 1


def test_idempotent_on_tissue_like_images():
    imgs = _patches(6, seed=2)
    ref = compute_stain_reference(imgs)
    for img in imgs:
        once, info = stain_normalize(img, ref, return_info=True)
        if info["clipped"]:
            continue
        assert np.abs(stain_normalize(once, ref) - once).max() < 1e-5


def test_pooled_reference_statistics():
    a = np.full((2, 2, 3), [0.9, 0.6, 0.8])
    b = np.full((2, 3, 3), [0.5, 0.3, 0.6])
    ref = compute_stain_reference([a, b])
    la = color.rgb2lab(a[0, 0][None, None])[0, 0]
    lb = color.rgb2lab(b[0, 0][None, None])[0, 0]
    # 4 pixels at la, 6 at lb
    mean = (4 * la + 6 * lb) / 10
    std = np.sqrt((4 * (la - mean) ** 2 + 6 * (lb - mean) ** 2) / 10)
    assert np.allclose(ref.mean, mean, atol=1e-9)
    assert np.allclose(ref.std, std, atol=1e-6)


def test_reference_degenerate_and_empty():
    with pytest.warns(UserWarning):
        ref = compute_stain_reference([np.full((3, 3, 3), 0.4)])
    assert ref.std == (1.0, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        compute_stain_reference([])
    with pytest.raises(ConfigurationError):
        StainReference((1, 2, 3), (1, 0, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert StainReference.from_dict(ref.to_dict()) == ref


def test_non_rgb_rejected():
    with pytest.raises(DataError):
        stain_normalize(np.zeros((4, 4)), StainReference((50, 0, 0), (1, 1, 1)))

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from ibo_eval.cam import (METHODS, ExplainerError, ExplainerSpec, explain, explain_all, normalize_map,
                          oracle_heatmap, random_heatmap)
from ibo_eval.classifier import ClassifierModel
from ibo_eval.errors import ConfigurationError


def _corr(a, b):
    a, b = a.ravel() - a.mean(), b.ravel() - b.mean()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def test_gradcam_follows_channel_zero(rng, channel_mean_model):
    img = rng.random((32, 32, 3))
    hm = explain(channel_mean_model, img, ExplainerSpec("grad-cam")).values
    with torch.no_grad():
        act = channel_mean_model.net.features(channel_mean_model.to_tensor(img))[0, 0]
    ref = F.interpolate(act[None, None].double(), size=(32, 32), mode="bilinear", align_corners=False)[0, 0]
    assert _corr(hm, normalize_map(ref.numpy())) >= 0.999


class ZeroFeatures(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = nn.Conv2d(3, 4, 3, padding=1)
        nn.init.zeros_(self.features.weight)
        nn.init.zeros_(self.features.bias)
        self.fc = nn.Linear(4, 2)

    def forward(self, x):
        return self.fc(self.features(x).mean(dim=(2, 3)))


@pytest.mark.parametrize("method", [m for m in METHODS if m != "full-grad"])
def test_zero_feature_map_gives_zero_heatmap(method, rng):
    torch.manual_seed(0)
    model = ClassifierModel(ZeroFeatures(), 16, target_layer="features")
    hm = explain(model, rng.random((16, 16, 3)), ExplainerSpec(method)).values
    assert np.all(hm == 0)


class RankOne(nn.Module):
    """Feature tensor A[c, h, w] = v[c] * u[h, w], independent of the input."""

    def __init__(self, u, v):
        super().__init__()
        self.register_buffer("u", u)
        self.register_buffer("v", v)
        self.features = nn.Identity()
        self.fc = nn.Linear(len(v), 2)

    def forward(self, x):
        a = self.v[:, None, None] * self.u[None] + 0.0 * x.mean()
        a = self.features(a[None].expand(x.shape[0], -1, -1, -1))
        return self.fc(a.mean(dim=(2, 3)))


def test_eigencam_rank_one(rng):
    u = torch.from_numpy(rng.random((4, 4))).float()
    v = torch.from_numpy(rng.standard_normal(6)).float()
    model = ClassifierModel(RankOne(u, v), 16, target_layer="features")
    hm = explain(model, rng.random((16, 16, 3)), ExplainerSpec("eigen-cam")).values
    up = F.interpolate(u[None, None].double(), size=(16, 16), mode="bilinear", align_corners=False)[0, 0]
    assert np.allclose(hm, normalize_map(up.numpy()), atol=1e-6)


def test_explain_all_shapes_and_determinism(rng, tiny_classifier):
    img = rng.random((32, 32, 3))
    specs = [ExplainerSpec(m) for m in METHODS]
    maps = explain_all(tiny_classifier, img, specs)
    assert sorted(maps) == sorted(METHODS)
    again = explain_all(tiny_classifier, img, specs)
    for m, h in maps.items():
        assert h.values.shape == (32, 32)
        assert h.values.min() >= 0 and h.values.max() <= 1
        assert h.values.max() == 0 or (h.values.min() == 0 and h.values.max() == pytest.approx(1.0))
        assert np.array_equal(h.values, again[m].values)
        # each map equals a standalone call (cache sharing is transparent)
        assert np.array_equal(h.values, explain(tiny_classifier, img, ExplainerSpec(m)).values)
    two = explain_all(tiny_classifier, img, specs[:2])
    assert len(two) == 2


def test_heatmap_matches_image_size_with_resize(rng, tiny_classifier):
    hm = explain(tiny_classifier, rng.random((48, 48, 3)), ExplainerSpec("grad-cam++"))
    assert hm.values.shape == (48, 48)


def test_hooks_are_removed(rng, tiny_classifier):
    explain_all(tiny_classifier, rng.random((32, 32, 3)), [ExplainerSpec(m) for m in METHODS])
    for mod in tiny_classifier.net.modules():
        assert not mod._forward_hooks


def test_scorecam_without_gradients(rng, tiny_classifier):
    with torch.no_grad():
        hm = explain(tiny_classifier, rng.random((32, 32, 3)), ExplainerSpec("score-cam"))
    assert hm.values.shape == (32, 32)


def test_errors(rng, tiny_classifier):
    with pytest.raises(ConfigurationError):
        ExplainerSpec("lime")
    with pytest.raises(ConfigurationError):
        explain(tiny_classifier, rng.random((32, 32, 3)), ExplainerSpec("grad-cam", target_layer="fc"))
    with pytest.raises(ConfigurationError):
        explain(tiny_classifier, rng.random((32, 32, 3)), ExplainerSpec("grad-cam", target_layer="missing"))
    with pytest.raises(ExplainerError) as info:
        explain_all(tiny_classifier, rng.random((32, 32, 3)), [ExplainerSpec("score-cam", target_layer="fc")])
    assert info.value.method == "score-cam"


def test_normalize_constant_map():
    assert np.all(normalize_map(np.full((3, 3), 7.0)) == 0)
    out = normalize_map(np.array([[1.0, 3.0]]))
    assert out.tolist() == [[0.0, 1.0]]


def test_reference_heatmaps():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:4, 2:5] = 1
    assert np.array_equal(oracle_heatmap(gt), gt.astype(float))
    a, b = random_heatmap((16, 16), 3), random_heatmap((16, 16), 3)
    assert np.array_equal(a, b) and a.min() == 0 and a.max() == 1
    assert not np.array_equal(a, random_heatmap((16, 16), 4))

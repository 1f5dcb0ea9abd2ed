import numpy as np
import pytest
import torch
import torch.nn as nn

from ibo_eval.classifier import ClassifierModel, SmallCNN
from ibo_eval.data import generate_synthetic_corpus
from ibo_eval.diffusion import DenoiserModel, UNet, make_schedule


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(root, seed=3, n_normal=10, n_tumor=10, size=32)


@pytest.fixture
def tiny_classifier():
    torch.manual_seed(0)
    return ClassifierModel(SmallCNN(width=4), 32)


@pytest.fixture(scope="session")
def tiny_denoiser():
    torch.manual_seed(0)
    return DenoiserModel(UNet(base=4, mults=(1, 2), patch=1), make_schedule(8), 16)


class ChannelMeanNet(nn.Module):
    """Tumor logit = spatial mean of channel 0 of ``features``; normal logit = 0."""

    def __init__(self, channels=4):
        super().__init__()
        self.features = nn.Sequential(nn.Conv2d(3, channels, 3, padding=1), nn.ReLU(), nn.MaxPool2d(4))
        self.fc = nn.Identity()

    def forward(self, x):
        a = self.features(x)
        tumor = a[:, 0].mean(dim=(1, 2))
        return torch.stack([torch.zeros_like(tumor), tumor], dim=1)


@pytest.fixture
def channel_mean_model():
    torch.manual_seed(3)
    net = ChannelMeanNet()
    with torch.no_grad():
        net.features[0].bias.fill_(0.5)
    return ClassifierModel(net, 32, target_layer="features")

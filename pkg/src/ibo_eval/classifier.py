"""Binary tumor/normal patch classifier.

The default network is a small four-stage CNN; ``arch="resnet50"`` swaps
in torchvision's ResNet50 for full-scale runs.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DataError
from .io import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

CLASS_ORDER = ("normal", "tumor")
TUMOR = 1


def _stage(cin, cout, pool):
    layers = [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU()]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class SmallCNN(nn.Module):
    """Four conv stages, global average pooling, linear head.

    ``stage4`` is the last spatial stage and the default CAM target.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        self.stage1 = _stage(3, width, True)
        self.stage2 = _stage(width, 2 * width, True)
        self.stage3 = _stage(2 * width, 4 * width, True)
        self.stage4 = _stage(4 * width, 4 * width, False)
        self.fc = nn.Linear(4 * width, 2)

    def forward(self, x):
        x = self.stage4(self.stage3(self.stage2(self.stage1(x))))
        return self.fc(x.mean(dim=(2, 3)))


def build_network(arch: str = "small_cnn", width: int = 16) -> nn.Module:
    if arch == "small_cnn":
        return SmallCNN(width)
    if arch == "resnet50":
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.fc = nn.Linear(net.fc.in_features, 2)
        return net
    raise ConfigurationError(f"unknown classifier architecture {arch!r}")


DEFAULT_TARGET_LAYER = {"small_cnn": "stage4", "resnet50": "layer4"}


@dataclass(frozen=True)
class Prediction:
    p_tumor: float
    logits: tuple


@dataclass
class ClassifierModel:
    """A network plus the preprocessing that must travel with it."""

    net: nn.Module
    input_size: int
    norm_mean: tuple = (0.0, 0.0, 0.0)
    norm_std: tuple = (1.0, 1.0, 1.0)
    resize: str = "resize"
    arch: str = "small_cnn"
    target_layer: str = "stage4"
    class_order: tuple = CLASS_ORDER
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.net.eval()

    @property
    def checkpoint_id(self) -> str:
        return parameter_hash(self.net)

    def layer(self, name: str) -> nn.Module:
        modules = dict(self.net.named_modules())
        if name not in modules:
            raise ConfigurationError(f"model has no layer {name!r}")
        return modules[name]

    def to_tensor(self, images) -> torch.Tensor:
        """(N, H, W, 3) or (H, W, 3) arrays in [0, 1] to a normalized batch."""
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise DataError(f"expected RGB images, got shape {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
        if x.shape[-2:] != (self.input_size, self.input_size):
            if self.resize != "resize":
                raise DataError(
                    f"image size {tuple(x.shape[-2:])} does not match model input {self.input_size}")
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                              align_corners=False, antialias=True)
        mean = torch.tensor(self.norm_mean, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.norm_std, dtype=x.dtype).view(1, 3, 1, 1)
        return (x - mean) / std

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "state_dict": self.net.state_dict(),
            "meta": {
                "arch": self.arch, "input_size": self.input_size, "norm_mean": list(self.norm_mean),
                "norm_std": list(self.norm_std), "resize": self.resize, "class_order": list(self.class_order),
                "target_layer": self.target_layer, "width": self.meta.get("width", 16),
                "checkpoint_id": self.checkpoint_id, **{k: v for k, v in self.meta.items() if k != "width"},
            },
        }
        buf = _io.BytesIO()
        torch.save(payload, buf)
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        meta = payload["meta"]
        net = build_network(meta["arch"], meta.get("width", 16))
        net.load_state_dict(payload["state_dict"])
        return cls(net, meta["input_size"], tuple(meta["norm_mean"]), tuple(meta["norm_std"]),
                   meta["resize"], meta["arch"], meta["target_layer"], tuple(meta["class_order"]),
                   {"width": meta.get("width", 16)})


def parameter_hash(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@torch.no_grad()
def predict_batch(model: ClassifierModel, images) -> np.ndarray:
    """Tumor probabilities for a stack of images."""
    logits = model.net(model.to_tensor(images)).double()
    return torch.softmax(logits, dim=1)[:, TUMOR].numpy()


@torch.no_grad()
def predict(model: ClassifierModel, img) -> Prediction:
    logits = model.net(model.to_tensor(img))[0].double()
    p = torch.softmax(logits, dim=0)
    return Prediction(float(p[TUMOR]), tuple(float(v) for v in logits))


# --------------------------------------------------------------------------
# training


@dataclass
class ClassifierConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    arch: str = "small_cnn"
    width: int = 16
    input_size: Optional[int] = None
    resize: str = "resize"
    augment: bool = True


def _stack(patches):
    x = np.stack([p.image for p in patches]).astype(np.float32)
    y = np.array([CLASS_ORDER.index(p.label) for p in patches], dtype=np.int64)
    return x, y


def _augment(xb: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    k = int(torch.randint(0, 4, (1,), generator=gen))
    xb = torch.rot90(xb, k, dims=(2, 3))
    if int(torch.randint(0, 2, (1,), generator=gen)):
        xb = torch.flip(xb, dims=(3,))
    return xb


def accuracy(model: ClassifierModel, patches) -> float:
    if not patches:
        return float("nan")
    x, y = _stack(patches)
    probs = np.concatenate([predict_batch(model, x[i:i + 256]) for i in range(0, len(x), 256)])
    return float(np.mean((probs >= 0.5).astype(np.int64) == y))


def train_classifier(train: Sequence, val: Sequence, config: ClassifierConfig = ClassifierConfig(),
                     out_dir=None) -> ClassifierModel:
    """Train with Adam and cross-entropy; persist checkpoint and per-epoch log.

    Writes ``classifier.pt`` and ``train_log.csv`` to ``out_dir`` when given.
    """
    labels = {p.label for p in train}
    if labels != set(CLASS_ORDER):
        raise ConfigurationError(f"training split must contain both classes, found {sorted(labels)}")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    x, y = _stack(train)
    size = config.input_size or x.shape[1]
    mean = tuple(float(v) for v in x.reshape(-1, 3).mean(axis=0))
    std = tuple(float(v) for v in x.reshape(-1, 3).std(axis=0) + 1e-6)
    net = build_network(config.arch, config.width)
    model = ClassifierModel(net, size, mean, std, config.resize, config.arch,
                            DEFAULT_TARGET_LAYER[config.arch], meta={"width": config.width})
    xt = model.to_tensor(x)
    yt = torch.from_numpy(y)

    opt = torch.optim.Adam(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rows = []
    for epoch in range(1, config.epochs + 1):
        net.train()
        perm = torch.randperm(len(xt), generator=gen)
        total = 0.0
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            xb = _augment(xt[idx], gen) if config.augment else xt[idx]
            loss = F.cross_entropy(net(xb), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        net.eval()
        val_acc = accuracy(model, val)
        rows.append({"epoch": epoch, "loss": total / len(xt), "val_accuracy": val_acc})
        log.info("classifier epoch %d loss %.4f val_acc %.4f", epoch, rows[-1]["loss"], val_acc)

    model.meta["val_accuracy"] = rows[-1]["val_accuracy"] if rows else accuracy(model, val)
    if out_dir is not None:
        out_dir = Path(out_dir)
        model.save(out_dir / "classifier.pt")
        write_log_csv(out_dir / "train_log.csv", rows, ["epoch", "loss", "val_accuracy"])
    return model


def write_log_csv(path, rows, fields):
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    atomic_write_text(path, buf.getvalue())

"""Unconditional DDPM on normal patches and RePaint inpainting.

Model space is [-1, 1]; images enter and leave in [0, 1]. Timesteps are
1-based (t = 1..T) everywhere, with alpha_bar_0 = 1.
"""
from __future__ import annotations

import hashlib
import io as _io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .classifier import parameter_hash, write_log_csv
from .errors import ConfigurationError, DataError
from .io import atomic_write_bytes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    kind: str = "linear"

    @property
    def alpha(self):
        return 1.0 - self.beta

    @property
    def alpha_bar(self):
        return np.cumprod(self.alpha)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 1-based t, with alpha_bar_0 = 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    @property
    def sigma(self):
        """Posterior std sqrt(beta_tilde_t); zero at t = 1."""
        ab = self.alpha_bar
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        return np.sqrt((1.0 - ab_prev) / (1.0 - ab) * self.beta)

    def to_dict(self):
        return {"T": self.T, "kind": self.kind}


def make_schedule(T: int, kind: str = "linear") -> DiffusionSchedule:
    """Linear betas from 1e-4 to 0.02, rescaled by 1000/T."""
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if kind != "linear":
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    scale = 1000.0 / T
    beta = np.linspace(scale * 1e-4, scale * 0.02, T, dtype=np.float64)
    beta = np.clip(beta, 1e-8, 0.999)
    return DiffusionSchedule(T, beta, kind)


# --------------------------------------------------------------------------
# denoiser network


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(torch.get_default_dtype())


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(math.gcd(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Small U-Net noise predictor eps(x_t, t).

    ``patch > 1`` folds patch x patch pixel blocks into channels before the
    first convolution (and unfolds at the end), cutting cost by patch**2.
    """

    def __init__(self, base: int = 16, mults: Sequence[int] = (1, 2, 4), patch: int = 1):
        super().__init__()
        self.base = base
        self.mults = tuple(mults)
        self.patch = patch
        tdim = base * 4
        cio = 3 * patch * patch
        self.time = nn.Sequential(nn.Linear(base, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inc = nn.Conv2d(cio, base, 3, padding=1)
        chans = [base * m for m in self.mults]
        self.down = nn.ModuleList()
        self.pool = nn.ModuleList()
        c = base
        for i, ch in enumerate(chans):
            self.down.append(ResBlock(c, ch, tdim))
            c = ch
            if i < len(chans) - 1:
                self.pool.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = ResBlock(c, c, tdim)
        self.up = nn.ModuleList()
        self.upconv = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chans))):
            self.up.append(ResBlock(c + ch, ch, tdim))
            c = ch
            if i > 0:
                self.upconv.append(nn.Conv2d(c, c, 3, padding=1))
        self.out_norm = nn.GroupNorm(math.gcd(8, c), c)
        self.out = nn.Conv2d(c, cio, 3, padding=1)

    def forward(self, x, t):
        temb = self.time(timestep_embedding(t, self.base).to(x.dtype))
        if self.patch > 1:
            x = F.pixel_unshuffle(x, self.patch)
        h = self.inc(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.pool):
                h = self.pool[i](h)
        h = self.mid(h, temb)
        for i, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if i < len(self.upconv):
                h = self.upconv[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.out(F.silu(self.out_norm(h)))
        return F.pixel_shuffle(h, self.patch) if self.patch > 1 else h


@dataclass
class DenoiserModel:
    net: nn.Module
    schedule: DiffusionSchedule
    image_size: int
    corpus_fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.net.eval()

    @property
    def checkpoint_id(self) -> str:
        return parameter_hash(self.net)

    def eps(self, x: torch.Tensor, t: int) -> torch.Tensor:
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        return self.net(x, tt)

    def save(self, path):
        payload = {
            "state_dict": self.net.state_dict(),
            "meta": {
                "schedule": self.schedule.to_dict(), "image_size": self.image_size,
                "base": self.net.base, "mults": list(self.net.mults), "patch": self.net.patch,
                "corpus_fingerprint": self.corpus_fingerprint, "checkpoint_id": self.checkpoint_id,
                **self.meta,
            },
        }
        buf = _io.BytesIO()
        torch.save(payload, buf)
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        meta = payload["meta"]
        net = UNet(meta["base"], meta["mults"], meta.get("patch", 1))
        net.load_state_dict(payload["state_dict"])
        sched = make_schedule(meta["schedule"]["T"], meta["schedule"]["kind"])
        extra = {k: v for k, v in meta.items()
                 if k not in ("schedule", "image_size", "base", "mults", "patch", "corpus_fingerprint",
                              "checkpoint_id")}
        return cls(net, sched, meta["image_size"], meta["corpus_fingerprint"], extra)


def to_model_space(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))) * 2.0 - 1.0


def from_model_space(x: torch.Tensor) -> np.ndarray:
    return ((x.double().clamp(-1, 1) + 1.0) / 2.0).numpy().transpose(0, 2, 3, 1)


def corpus_fingerprint(patches) -> str:
    h = hashlib.sha256()
    for p in patches:
        h.update(p.id.encode())
        h.update(np.ascontiguousarray(p.image, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# training


@dataclass
class DDPMConfig:
    T: int = 200
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    base: int = 16
    mults: tuple = (1, 2, 4)
    patch: int = 2
    seed: int = 0
    ema_decay: float = 0.995
    holdout: int = 8


def _augment(x, gen):
    k = int(torch.randint(0, 4, (1,), generator=gen))
    x = torch.rot90(x, k, dims=(2, 3))
    if int(torch.randint(0, 2, (1,), generator=gen)):
        x = torch.flip(x, dims=(3,))
    return x


def denoising_loss(net, x0, schedule: DiffusionSchedule, t, noise):
    ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t - 1].view(-1, 1, 1, 1)
    xt = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
    return F.mse_loss(net(xt, t), noise)


def train_ddpm(patches, config: DDPMConfig = DDPMConfig(), out_dir=None,
               holdout=None) -> DenoiserModel:
    """Fit eps-prediction on normal patches; log train and held-out loss per epoch.

    ``holdout`` patches (default: the last ``config.holdout`` of ``patches``,
    which are then excluded from training) give the validation loss with a
    fixed set of timesteps and noises.
    """
    patches = list(patches)
    if not patches:
        raise ConfigurationError("DDPM training corpus is empty")
    bad = [p.id for p in patches if p.label != "normal"]
    if bad:
        raise ConfigurationError(f"DDPM must be trained on normal patches only; got tumor patch {bad[0]}")
    if holdout is None and config.holdout and len(patches) > config.holdout:
        holdout = patches[-config.holdout:]
        patches = patches[:-config.holdout]
    holdout = list(holdout or [])

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    schedule = make_schedule(config.T)
    net = UNet(config.base, config.mults, config.patch)
    ema = UNet(config.base, config.mults, config.patch)
    ema.load_state_dict(net.state_dict())
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)

    x_all = to_model_space(np.stack([p.image for p in patches]))
    size = x_all.shape[-1]
    if holdout:
        x_hold = to_model_space(np.stack([p.image for p in holdout]))
        hg = torch.Generator().manual_seed(config.seed + 1)
        t_hold = torch.randint(1, config.T + 1, (4, len(x_hold)), generator=hg)
        n_hold = torch.randn((4,) + tuple(x_hold.shape), generator=hg)

    def holdout_loss(model):
        if not holdout:
            return float("nan")
        with torch.no_grad():
            return float(np.mean([denoising_loss(model, x_hold, schedule, t_hold[r], n_hold[r]).item()
                                  for r in range(4)]))

    rows = []
    for epoch in range(1, config.epochs + 1):
        net.train()
        perm = torch.randperm(len(x_all), generator=gen)
        total = 0.0
        for i in range(0, len(perm), config.batch_size):
            xb = _augment(x_all[perm[i:i + config.batch_size]], gen)
            t = torch.randint(1, config.T + 1, (len(xb),), generator=gen)
            noise = torch.randn(xb.shape, generator=gen)
            loss = denoising_loss(net, xb, schedule, t, noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                for pe, pn in zip(ema.parameters(), net.parameters()):
                    pe.mul_(config.ema_decay).add_(pn, alpha=1 - config.ema_decay)
            total += loss.item() * len(xb)
        rows.append({"epoch": epoch, "loss": total / len(x_all), "holdout_loss": holdout_loss(net)})
        if epoch % 25 == 0 or epoch == 1:
            log.info("ddpm epoch %d loss %.4f holdout %.4f", epoch, rows[-1]["loss"], rows[-1]["holdout_loss"])

    model = DenoiserModel(ema if config.ema_decay > 0 else net, schedule, size, corpus_fingerprint(patches),
                          {"epochs": config.epochs, "holdout_loss": holdout_loss(ema)})
    model.meta["loss_log"] = rows
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta_log = model.meta.pop("loss_log")
        model.save(out_dir / "ddpm.pt")
        model.meta["loss_log"] = meta_log
        write_log_csv(out_dir / "ddpm_log.csv", rows, ["epoch", "loss", "holdout_loss"])
    return model


# --------------------------------------------------------------------------
# RePaint


@dataclass
class RepaintConfig:
    U: int = 10
    j: int = 10
    seed: int = 0
    strict_paper: bool = False

    def __post_init__(self):
        if self.U < 1 or self.j < 1:
            raise ConfigurationError("RePaint needs U >= 1 and j >= 1")

    def to_dict(self):
        return {"U": self.U, "j": self.j, "seed": self.seed, "strict_paper": self.strict_paper}


def repaint_schedule(T: int, U: int, j: int):
    """Ordered events ``("reverse", t)`` (x_t -> x_{t-1}) and
    ``("forward", t)`` (x_{t-1} -> x_t).

    For j == 1 each step t gets U reverse passes with re-noising between
    them (none at t = 1). For j > 1 blocks of j reverse steps are undone
    by j forward steps, U - 1 times per block.
    """
    events = []
    if j == 1:
        for t in range(T, 0, -1):
            for u in range(1, U + 1):
                events.append(("reverse", t))
                if u < U and t > 1:
                    events.append(("forward", t))
        return events
    jumps = {s: U - 1 for s in range(0, T - j, j)}
    t = T
    while t >= 1:
        events.append(("reverse", t))
        t -= 1
        # landing on x_t; jump table is indexed by t - 1 so t = 1 is eligible
        if t >= 1 and jumps.get(t - 1, 0) > 0:
            jumps[t - 1] -= 1
            for _ in range(j):
                t += 1
                events.append(("forward", t))
    return events


def sample_known(x0: torch.Tensor, t: int, schedule: DiffusionSchedule, noise: torch.Tensor,
                 strict_paper: bool = False) -> torch.Tensor:
    """Known-region sample used when stepping x_t -> x_{t-1}.

    Default: forward-diffuse x0 to level t-1 with sqrt(1-alpha_bar) noise.
    ``strict_paper`` uses alpha_bar_t with an unsquared (1-alpha_bar_t).
    """
    if strict_paper:
        ab = schedule.alpha_bar_at(t)
        return math.sqrt(ab) * x0 + (1.0 - ab) * noise
    ab = schedule.alpha_bar_at(t - 1)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def _randn(gens, shape):
    return torch.stack([torch.randn(shape, generator=g) for g in gens])


@torch.no_grad()
def repaint_tensor(x0: torch.Tensor, m: torch.Tensor, eps_fn: Callable, schedule: DiffusionSchedule,
                   cfg: RepaintConfig, generators: Sequence[torch.Generator],
                   counter: Optional[Counter] = None) -> torch.Tensor:
    """RePaint in model space. ``m`` is (N, 1, H, W) with 1 = known.

    Returns the final x_0 before the known-region paste.
    """
    shape = tuple(x0.shape[1:])
    x = _randn(generators, shape)
    x_t = x
    prev = None
    for kind, t in repaint_schedule(schedule.T, cfg.U, cfg.j):
        if kind == "reverse":
            # a repeated pass at the same t (t = 1, no re-noising) restarts from the same x_t
            if prev != (kind, t):
                x_t = x
            x = x_t
            noise = _randn(generators, shape) if t > 1 else torch.zeros_like(x)
            known = sample_known(x0, t, schedule, noise, cfg.strict_paper)
            z = _randn(generators, shape) if t > 1 else torch.zeros_like(x)
            a = schedule.alpha[t - 1]
            b = schedule.beta[t - 1]
            ab = schedule.alpha_bar[t - 1]
            eps = eps_fn(x, t)
            unknown = (x - (b / math.sqrt(1.0 - ab)) * eps) / math.sqrt(a) + float(schedule.sigma[t - 1]) * z
            x = m * known + (1.0 - m) * unknown
            if counter is not None:
                counter[t] += 1
        else:
            b = schedule.beta_at(t - 1) if (cfg.strict_paper and t > 1) else schedule.beta_at(t)
            x = math.sqrt(1.0 - b) * x + math.sqrt(b) * _randn(generators, shape)
        prev = (kind, t)
    return x


def repaint(x, m, model: DenoiserModel, schedule: Optional[DiffusionSchedule] = None,
            cfg: RepaintConfig = RepaintConfig(), counter: Optional[Counter] = None,
            eps_fn: Optional[Callable] = None):
    """Inpaint pixels where ``m == 0``; pixels with ``m == 1`` are returned unchanged."""
    out = repaint_batch([x], [m], model, schedule, cfg, [cfg.seed], counter, eps_fn)
    return out[0]


def repaint_batch(images, masks, model: DenoiserModel, schedule=None, cfg: RepaintConfig = RepaintConfig(),
                  seeds=None, counter=None, eps_fn=None):
    schedule = schedule or model.schedule
    images = [np.asarray(im, dtype=np.float64) for im in images]
    masks = [np.asarray(mk) for mk in masks]
    for im, mk in zip(images, masks):
        if im.ndim != 3 or mk.shape != im.shape[:2]:
            raise DataError(f"mask shape {mk.shape} does not match image {im.shape}")
        if model is not None and im.shape[0] != model.image_size:
            raise DataError(f"image size {im.shape[0]} does not match denoiser size {model.image_size}")
    seeds = list(seeds) if seeds is not None else [cfg.seed] * len(images)
    results = [im.copy() for im in images]
    todo = [i for i, mk in enumerate(masks) if not np.all(mk == 1)]
    if not todo:
        return results
    eps_fn = eps_fn or model.eps
    x0 = to_model_space(np.stack([images[i] for i in todo]))
    mt = torch.from_numpy(np.stack([(masks[i] == 1).astype(np.float32) for i in todo]))[:, None]
    gens = [torch.Generator().manual_seed(int(seeds[i]) % (2 ** 63)) for i in todo]
    x_hat = from_model_space(repaint_tensor(x0, mt, eps_fn, schedule, cfg, gens, counter))
    for k, i in enumerate(todo):
        known = (masks[i] == 1)[..., None]
        results[i] = np.where(known, images[i], np.clip(x_hat[k], 0.0, 1.0))
    return results


class DiffusionInpainter:
    """Adapter used by the IBO occlusion strategy (mask convention 1 = replace)."""

    def __init__(self, model: DenoiserModel, cfg: RepaintConfig = RepaintConfig()):
        self.model = model
        self.cfg = cfg

    def inpaint(self, img, replace_mask, seed=None):
        return self.inpaint_batch([img], [replace_mask], [self.cfg.seed if seed is None else seed])[0]

    def inpaint_batch(self, images, replace_masks, seeds=None):
        ms = [1 - np.asarray(r, dtype=np.uint8) for r in replace_masks]
        return repaint_batch(images, ms, self.model, self.model.schedule, self.cfg, seeds)

    def manifest(self):
        return {"T": self.model.schedule.T, **self.cfg.to_dict(), "checkpoint_id": self.model.checkpoint_id}

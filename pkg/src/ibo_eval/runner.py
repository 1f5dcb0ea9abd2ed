"""End-to-end experiment orchestration with a content-addressed cache.

Layout under ``<output>``::

    cache/<section>-<hash>/...     stage artifacts, keyed by config-section hashes
    manifest.json                  run manifest (config hash, artifacts, failures)
    report/                        CSV + JSON + PNG tables and figures

Every stage skips work whose artifact already exists, so an interrupted run
continues where it stopped when restarted with ``resume=True``.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io as _io
import json
import logging
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import io
from .cam import METHODS, ExplainerSpec, explain, oracle_heatmap, random_heatmap
from .classifier import ClassifierConfig, ClassifierModel, predict_batch, train_classifier
from .data import (LabeledPatch, StainReference, compute_stain_reference,
                   generate_synthetic_corpus, load_corpus, stain_normalize)
from .diffusion import DDPMConfig, DenoiserModel, DiffusionInpainter, RepaintConfig, train_ddpm
from .errors import ConfigurationError, DataError
from .masking import HeatmapLevels, MaskSequence, build_masks, important_region, kmeans_levels, threshold_region
from .metrics import alexnet_extractor, auc, curve_from_predictions, iou, lpips_batch
from .occlusion import STRATEGIES, StrategySpec, apply_batch_ibo, apply_iteratively

log = logging.getLogger(__name__)

PSEUDO_EXPLAINERS = ("oracle", "random")
STAGES = ("data", "classifier", "ddpm", "explain", "mask", "occlude", "evaluate", "report")

# hooks on a shared model are not safe under concurrent forward passes
_MODEL_LOCK = threading.Lock()


def canonical_hash(obj, n: int = 12) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:n]


def stable_seed(*parts) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:4], "little")


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    corpus_root: Optional[str] = None
    synth: dict = field(default_factory=lambda: {"n_normal": 64, "n_tumor": 64, "size": 64})
    samples: int = 20
    explainers: list = field(default_factory=lambda: list(METHODS))
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    seed: int = 0
    classifier: dict = field(default_factory=lambda: {"epochs": 8, "lr": 2e-3})
    classifier_checkpoint: Optional[str] = None
    ddpm: dict = field(default_factory=dict)
    ddpm_checkpoint: Optional[str] = None
    repaint: dict = field(default_factory=dict)
    target_layer: Optional[str] = None
    k: int = 5
    stain_normalize: bool = True
    cluster_source: str = "heatmap"
    exact_kmeans: bool = True
    auc_abscissa: str = "fraction"
    iou_binarization: str = "levels"
    iou_threshold: float = 0.5
    blur_sigma: Optional[float] = None
    nli_sigma: float = 0.1
    histogram_full_image: bool = False
    lpips: dict = field(default_factory=dict)
    ibo_batch: int = 16
    workers: int = 1
    gallery_samples: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        # JSON is a subset of YAML, so one loader handles both
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return canonical_hash(self.to_dict(), 16)

    def validate(self):
        bad = [e for e in self.explainers if e not in METHODS + PSEUDO_EXPLAINERS]
        if bad:
            raise ConfigurationError(f"unknown explainers {bad}")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigurationError(f"unknown strategies {bad}")
        if len(set(self.explainers)) != len(self.explainers) or len(set(self.strategies)) != len(self.strategies):
            raise ConfigurationError("explainer and strategy lists must not repeat entries")
        if self.samples < 1:
            raise ConfigurationError("samples must be >= 1")
        if self.k < 2:
            raise ConfigurationError("k must be at least 2")
        if self.cluster_source not in ("heatmap", "colormap_gray"):
            raise ConfigurationError(f"unknown cluster_source {self.cluster_source!r}")
        if self.auc_abscissa not in ("fraction", "step"):
            raise ConfigurationError("auc_abscissa must be 'fraction' or 'step'")
        if self.iou_binarization not in ("levels", "threshold"):
            raise ConfigurationError("iou_binarization must be 'levels' or 'threshold'")
        if self.workers < 1 or self.ibo_batch < 1:
            raise ConfigurationError("workers and ibo_batch must be >= 1")
        if self.blur_sigma is not None and self.blur_sigma <= 0:
            raise ConfigurationError("blur_sigma must be positive")
        for name, cls_ in (("classifier", ClassifierConfig), ("ddpm", DDPMConfig), ("repaint", RepaintConfig)):
            section = getattr(self, name)
            allowed = {f.name for f in dataclasses.fields(cls_)}
            extra = sorted(set(section) - allowed)
            if extra:
                raise ConfigurationError(f"unknown keys in {name}: {extra}")
        extra = sorted(set(self.lpips) - {"weights_path", "lin_path", "seed"})
        if extra:
            raise ConfigurationError(f"unknown keys in lpips: {extra}")
        extra = sorted(set(self.synth) - {"n_normal", "n_tumor", "size", "seed"})
        if extra:
            raise ConfigurationError(f"unknown keys in synth: {extra}")

    # resolved sections; each seed defaults to the master seed
    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(**{"seed": self.seed, **self.classifier})

    def ddpm_config(self) -> DDPMConfig:
        d = {"seed": self.seed, **self.ddpm}
        if "mults" in d:
            d["mults"] = tuple(d["mults"])
        return DDPMConfig(**d)

    def repaint_config(self) -> RepaintConfig:
        return RepaintConfig(**{"seed": self.seed, **self.repaint})

    def synth_config(self) -> dict:
        return {"seed": self.seed, "n_normal": 64, "n_tumor": 64, "size": 64, **self.synth}


# --------------------------------------------------------------------------
# run state


@dataclass
class StageRecord:
    path: str = ""
    hash: str = ""
    computed: int = 0
    cached: int = 0
    seconds: float = 0.0


class Run:
    """Mutable state of one pipeline invocation; the only writer of the manifest."""

    def __init__(self, cfg: ExperimentConfig, output, resume: bool = False):
        self.cfg = cfg
        self.output = Path(output)
        self.cache = self.output / "cache"
        manifest_path = self.output / "manifest.json"
        if manifest_path.exists():
            prev = io.read_json(manifest_path)
            if prev.get("config_hash") != cfg.hash():
                if not resume:
                    raise ConfigurationError(
                        f"{self.output} holds a run with a different config; pass resume to reuse it")
                log.warning("resuming with a changed config; cached artifacts are reused where hashes match")
        self.stages: dict[str, StageRecord] = {}
        self.artifacts: set[str] = set()
        self.failures: list[dict] = []
        self.skipped: list[dict] = []
        self.samples: list[str] = []
        self.results: list[str] = []
        self.notes: dict = {}
        self._lock = threading.Lock()
        self._ctx: dict = {}

    def stage(self, name) -> StageRecord:
        return self.stages.setdefault(name, StageRecord())

    def emit(self, path):
        with self._lock:
            self.artifacts.add(str(Path(path).relative_to(self.output)))

    def count(self, name, hit: bool):
        with self._lock:
            rec = self.stage(name)
            if hit:
                rec.cached += 1
            else:
                rec.computed += 1

    def fail(self, stage, error, **where):
        log.warning("%s failed for %s: %s", stage, where, error)
        with self._lock:
            self.failures.append({"stage": stage, "error": f"{type(error).__name__}: {error}", **where})

    def skip(self, reason, **where):
        with self._lock:
            self.skipped.append({"reason": reason, **where})

    def manifest(self) -> dict:
        return {
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_dict(),
            "stain_reference_source": "train" if self.cfg.stain_normalize else "none",
            "stages": {k: dataclasses.asdict(v) for k, v in self.stages.items()},
            "samples": self.samples,
            "results": sorted(self.results),
            "artifacts": sorted(self.artifacts),
            "skipped": self.skipped,
            "failures": self.failures,
            "notes": self.notes,
        }

    def write_manifest(self):
        io.write_json(self.output / "manifest.json", self.manifest())


def _timed(run: Run, name):
    class _T:
        def __enter__(self_):
            self_.t0 = time.perf_counter()

        def __exit__(self_, *exc):
            run.stage(name).seconds += round(time.perf_counter() - self_.t0, 3)
    return _T()


# --------------------------------------------------------------------------
# stages: data, stain reference, models


def _corpus_fingerprint(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _count_tumor_test(cfg: ExperimentConfig) -> int:
    if cfg.corpus_root is None:
        return int(cfg.synth_config()["n_tumor"])
    d = Path(cfg.corpus_root) / "test" / "tumor"
    return len(list(d.glob("*.png"))) if d.is_dir() else 0


def validate_run(cfg: ExperimentConfig):
    """Checks that must pass before any work starts."""
    cfg.validate()
    if cfg.corpus_root is not None and not Path(cfg.corpus_root).is_dir():
        raise ConfigurationError(f"corpus root not found: {cfg.corpus_root}")
    for key in ("classifier_checkpoint", "ddpm_checkpoint"):
        p = getattr(cfg, key)
        if p is not None and not Path(p).is_file():
            raise ConfigurationError(f"{key} not found: {p}")
    for key in ("weights_path", "lin_path"):
        p = cfg.lpips.get(key)
        if p is not None and not Path(p).is_file():
            raise ConfigurationError(f"lpips {key} not found: {p}")
    n = _count_tumor_test(cfg)
    if cfg.samples > n:
        raise ConfigurationError(f"requested {cfg.samples} samples but only {n} tumor test patches exist")


def stage_data(run: Run) -> Path:
    cfg = run.cfg
    with _timed(run, "data"):
        if cfg.corpus_root is not None:
            root = Path(cfg.corpus_root)
            h = _corpus_fingerprint(root)
            run.stage("data").cached += 1
        else:
            sc = cfg.synth_config()
            h = canonical_hash(sc)
            root = run.cache / f"data-{h}"
            hit = (root / "corpus.json").exists()
            if not hit:
                tmp = root.with_name(root.name + ".tmp")
                shutil.rmtree(tmp, ignore_errors=True)
                generate_synthetic_corpus(tmp, sc["seed"], sc["n_normal"], sc["n_tumor"], sc["size"])
                tmp.replace(root)
            run.count("data", hit)
            run.emit(root / "corpus.json")
    rec = run.stage("data")
    rec.path, rec.hash = str(root), h
    run._ctx["data_root"] = root
    return root


def _stain(run: Run):
    """Stain reference and training-split channel mean, computed once per corpus."""
    if "stain" in run._ctx:
        return run._ctx["stain"]
    root = run._ctx["data_root"]
    h = canonical_hash([run.stage("data").hash, run.cfg.stain_normalize])
    path = run.cache / f"stain-{h}" / "reference.json"
    if path.exists():
        info = io.read_json(path)
    else:
        train = load_corpus(root, "train")
        if not train:
            raise ConfigurationError("training split is empty")
        ref = compute_stain_reference([p.image for p in train]) if run.cfg.stain_normalize else None
        imgs = [_normalized(p.image, ref) for p in train]
        mean = np.mean([im.reshape(-1, 3).mean(axis=0) for im in imgs], axis=0)
        info = {"reference": ref.to_dict() if ref else None, "dataset_mean": [float(v) for v in mean],
                "source_split": "train"}
        io.write_json(path, info)
    run.emit(path)
    ref = StainReference.from_dict(info["reference"]) if info["reference"] else None
    run._ctx["stain"] = (ref, tuple(info["dataset_mean"]), h)
    return run._ctx["stain"]


def _normalized(img, ref):
    return img if ref is None else stain_normalize(img, ref)


def _load_split(run: Run, split: str):
    key = ("split", split)
    if key not in run._ctx:
        ref = _stain(run)[0]
        run._ctx[key] = [dataclasses.replace(p, image=_normalized(p.image, ref))
                         for p in load_corpus(run._ctx["data_root"], split)]
    return run._ctx[key]


def stage_classifier(run: Run) -> ClassifierModel:
    cfg = run.cfg
    with _timed(run, "classifier"):
        if cfg.classifier_checkpoint:
            model = ClassifierModel.load(cfg.classifier_checkpoint)
            run.count("classifier", True)
            path = Path(cfg.classifier_checkpoint)
        else:
            cc = cfg.classifier_config()
            _, _, stain_h = _stain(run)
            h = canonical_hash([stain_h, dataclasses.asdict(cc)])
            out = run.cache / f"classifier-{h}"
            path = out / "classifier.pt"
            hit = path.exists()
            if hit:
                model = ClassifierModel.load(path)
            else:
                model = train_classifier(_load_split(run, "train"), _load_split(run, "val"), cc, out)
            run.count("classifier", hit)
            run.emit(path)
            if (out / "train_log.csv").exists():
                run.emit(out / "train_log.csv")
    rec = run.stage("classifier")
    rec.path, rec.hash = str(path), model.checkpoint_id
    run.notes["classifier_val_accuracy"] = model.meta.get("val_accuracy")
    run._ctx["classifier"] = model
    return model


def stage_ddpm(run: Run) -> DenoiserModel:
    cfg = run.cfg
    with _timed(run, "ddpm"):
        if cfg.ddpm_checkpoint:
            model = DenoiserModel.load(cfg.ddpm_checkpoint)
            run.count("ddpm", True)
            path = Path(cfg.ddpm_checkpoint)
        else:
            dc = cfg.ddpm_config()
            _, _, stain_h = _stain(run)
            h = canonical_hash([stain_h, dataclasses.asdict(dc)])
            out = run.cache / f"ddpm-{h}"
            path = out / "ddpm.pt"
            hit = path.exists()
            if hit:
                model = DenoiserModel.load(path)
            else:
                normals = [p for p in _load_split(run, "train") if p.label == "normal"]
                model = train_ddpm(normals, dc, out)
            run.count("ddpm", hit)
            run.emit(path)
            if (out / "ddpm_log.csv").exists():
                run.emit(out / "ddpm_log.csv")
    rec = run.stage("ddpm")
    rec.path, rec.hash = str(path), model.checkpoint_id
    run._ctx["ddpm"] = model
    return model


# --------------------------------------------------------------------------
# stages: per-sample work


def select_samples(run: Run) -> list[LabeledPatch]:
    tumors = [p for p in _load_split(run, "test") if p.label == "tumor"]
    if run.cfg.samples > len(tumors):
        raise ConfigurationError(f"requested {run.cfg.samples} samples but only {len(tumors)} tumor test patches exist")
    rng = np.random.default_rng(run.cfg.seed)
    idx = sorted(rng.choice(len(tumors), size=run.cfg.samples, replace=False).tolist())
    chosen = [tumors[i] for i in idx]
    run.samples = [p.id for p in chosen]
    return chosen


def _explain_dir(run: Run) -> Path:
    model = run._ctx["classifier"]
    _, _, stain_h = _stain(run)
    h = canonical_hash([stain_h, model.checkpoint_id, run.cfg.target_layer, run.cfg.seed])
    return run.cache / f"explain-{h}"


def _heatmap(run: Run, patch: LabeledPatch, image, explainer: str):
    model = run._ctx["classifier"]
    if explainer == "oracle":
        if patch.gt_mask is None:
            raise DataError(f"patch {patch.id}: oracle heatmap needs a ground-truth mask")
        return oracle_heatmap(patch.gt_mask), {"method": "oracle"}
    if explainer == "random":
        seed = stable_seed(run.cfg.seed, patch.id, "random")
        return random_heatmap(image.shape[:2], seed), {"method": "random", "seed": seed}
    spec = ExplainerSpec(explainer, target_layer=run.cfg.target_layer)
    with _MODEL_LOCK:
        hm = explain(model, image, spec)
    return hm.values, {"method": hm.method, "layer": hm.layer, "target_class": hm.target_class}


def stage_explain(run: Run, patches) -> dict:
    """Normalized image, ground truth and one heatmap per explainer for each sample."""
    root = _explain_dir(run)
    run.stage("explain").path = str(root)
    out = {}
    with _timed(run, "explain"):
        for patch in patches:
            d = root / patch.id
            img_path = d / "image.png"
            if not img_path.exists():
                io.write_image(img_path, patch.image)
            if patch.gt_mask is not None and not (d / "gt.png").exists():
                io.write_mask(d / "gt.png", patch.gt_mask)
            run.emit(img_path)
            if patch.gt_mask is not None:
                run.emit(d / "gt.png")
            # everything downstream sees the 8-bit image, as a resumed run would
            image = io.read_image(img_path)
            out[patch.id] = {"image": image, "gt": patch.gt_mask, "heatmaps": {}}
            for e in run.cfg.explainers:
                hp = d / e / "heatmap.png"
                try:
                    hit = hp.exists()
                    if not hit:
                        values, meta = _heatmap(run, patch, image, e)
                        io.write_heatmap(hp, values, meta)
                    run.count("explain", hit)
                    run.emit(hp)
                    run.emit(hp.with_suffix(".json"))
                    out[patch.id]["heatmaps"][e] = io.read_heatmap(hp)[0]
                except Exception as exc:
                    run.fail("explain", exc, sample=patch.id, explainer=e)
    return out


def _mask_dir(run: Run) -> Path:
    cfg = run.cfg
    h = canonical_hash([_explain_dir(run).name, cfg.k, cfg.seed, cfg.cluster_source, cfg.exact_kmeans])
    return run.cache / f"mask-{h}"


def _levels_to_masks(level_map, k) -> MaskSequence:
    return build_masks(HeatmapLevels(level_map, np.full(k, np.nan), k, 0.0))


def stage_mask(run: Run, explained: dict) -> dict:
    """HeatmapLevels and MaskSequence per (sample, explainer); degenerate ones are skipped."""
    root = _mask_dir(run)
    run.stage("mask").path = str(root)
    k = run.cfg.k
    out = {}
    with _timed(run, "mask"):
        for sid, item in explained.items():
            for e, hm in item["heatmaps"].items():
                d = root / sid / e
                lp = d / "levels.png"
                try:
                    hit = lp.exists() and (d / "levels.json").exists()
                    if not hit:
                        lv = kmeans_levels(hm, k=k, seed=stable_seed(run.cfg.seed, sid, e, "kmeans"),
                                           exact=run.cfg.exact_kmeans, source=run.cfg.cluster_source)
                        seq = build_masks(lv)
                        for i, m in enumerate(seq.step_masks, start=1):
                            io.write_mask(d / f"step{i}.png", m)
                        io.write_level_map(lp, lv.level)
                        io.write_json(d / "levels.json", {
                            "centroids": [None if np.isnan(c) else float(c) for c in lv.centroids],
                            "wcss": float(lv.wcss), "k": k, "degenerate": seq.degenerate,
                            "occluded_fraction": list(seq.occluded_fraction),
                            "meta": {kk: v for kk, v in lv.meta.items() if kk != "wcss_history"},
                        })
                    run.count("mask", hit)
                    level_map = io.read_level_map(lp)
                    seq = _levels_to_masks(level_map, k)
                    run.emit(lp)
                    run.emit(d / "levels.json")
                    for i in range(1, len(seq) + 1):
                        run.emit(d / f"step{i}.png")
                    if seq.degenerate:
                        run.skip("degenerate heatmap: no occludable level", sample=sid, explainer=e)
                        continue
                    out[(sid, e)] = (level_map, seq)
                except Exception as exc:
                    run.fail("mask", exc, sample=sid, explainer=e)
    return out


def _strategy_spec(run: Run, kind: str, sid: str, e: str, size: int) -> StrategySpec:
    cfg = run.cfg
    _, dataset_mean, _ = _stain(run)
    ibo = None
    if kind == "ibo":
        ibo = DiffusionInpainter(run._ctx["ddpm"], cfg.repaint_config())
    return StrategySpec(kind, blur_sigma=cfg.blur_sigma or size / 16.0, dataset_mean=dataset_mean,
                        nli_sigma=cfg.nli_sigma, rng_seed=stable_seed(cfg.seed, sid, e, kind),
                        histogram_full_image=cfg.histogram_full_image, ibo=ibo)


def _strategy_key(run: Run, kind: str, size: int) -> list:
    cfg = run.cfg
    key = [_mask_dir(run).name, kind, cfg.seed]
    if kind == "blurring":
        key.append(cfg.blur_sigma or size / 16.0)
    elif kind == "mean":
        key.append(_stain(run)[1])
    elif kind == "nli":
        key.append(cfg.nli_sigma)
    elif kind == "histogram":
        key.append(cfg.histogram_full_image)
    elif kind == "ibo":
        key += [run._ctx["ddpm"].checkpoint_id, cfg.repaint_config().to_dict()]
    return key


def _occlude_dir(run: Run, kind: str, size: int) -> Path:
    return run.cache / f"occlude-{kind}-{canonical_hash(_strategy_key(run, kind, size))}"


def _steps_dir(run, kind, size, sid, e) -> Path:
    return _occlude_dir(run, kind, size) / sid / e / kind


def _have_steps(d: Path, n: int) -> bool:
    return all((d / f"step{i}.png").exists() for i in range(1, n + 1))


def stage_occlude(run: Run, explained: dict, masks: dict) -> dict:
    """Occluded step images per (sample, explainer, strategy), read back from disk."""
    out = {}
    size = next(iter(explained.values()))["image"].shape[0] if explained else 0
    with _timed(run, "occlude"):
        for kind in run.cfg.strategies:
            run.stage("occlude").path = str(run.cache)
            todo = []
            for (sid, e), (_, seq) in masks.items():
                d = _steps_dir(run, kind, size, sid, e)
                if _have_steps(d, len(seq)):
                    run.count("occlude", True)
                else:
                    todo.append((sid, e))
            if kind == "ibo":
                _occlude_ibo(run, explained, masks, todo, size)
            else:
                def work(pair, kind=kind):
                    sid, e = pair
                    seq = masks[pair][1]
                    try:
                        spec = _strategy_spec(run, kind, sid, e, size)
                        steps = apply_iteratively(explained[sid]["image"], seq, spec,
                                                  {"sample": sid, "explainer": e})
                        d = _steps_dir(run, kind, size, sid, e)
                        for i, st in enumerate(steps, start=1):
                            io.write_image(d / f"step{i}.png", st.image)
                        run.count("occlude", False)
                    except Exception as exc:
                        run.fail("occlude", exc, sample=sid, explainer=e, strategy=kind)
                with ThreadPoolExecutor(max_workers=run.cfg.workers) as pool:
                    list(pool.map(work, todo))
            for (sid, e), (_, seq) in masks.items():
                d = _steps_dir(run, kind, size, sid, e)
                if not _have_steps(d, len(seq)):
                    continue
                paths = [d / f"step{i}.png" for i in range(1, len(seq) + 1)]
                for p in paths:
                    run.emit(p)
                    if kind == "ibo":
                        run.emit(p.with_suffix(".json"))
                out[(sid, e, kind)] = [io.read_image(p) for p in paths]
    return out


def _occlude_ibo(run: Run, explained, masks, todo, size):
    if not todo:
        return
    inpainter = DiffusionInpainter(run._ctx["ddpm"], run.cfg.repaint_config())
    spec = _strategy_spec(run, "ibo", "", "", size)
    spec.ibo = inpainter
    for start in range(0, len(todo), run.cfg.ibo_batch):
        chunk = todo[start:start + run.cfg.ibo_batch]
        seeds = [stable_seed(run.cfg.seed, sid, e, "ibo") for sid, e in chunk]
        try:
            results = apply_batch_ibo([explained[sid]["image"] for sid, _ in chunk],
                                      [masks[p][1] for p in chunk], spec, sample_seeds=seeds)
        except Exception as exc:
            for sid, e in chunk:
                run.fail("occlude", exc, sample=sid, explainer=e, strategy="ibo")
            continue
        for (sid, e), seed, steps in zip(chunk, seeds, results):
            d = _steps_dir(run, "ibo", size, sid, e)
            for i, im in enumerate(steps, start=1):
                io.write_image(d / f"step{i}.png", im)
                io.write_json(d / f"step{i}.json", {**inpainter.manifest(), "sample_seed": seed, "step": i})
            run.count("occlude", False)
        log.info("ibo: %d/%d pairs inpainted", min(start + run.cfg.ibo_batch, len(todo)), len(todo))


def _extractor(run: Run):
    if "lpips" not in run._ctx:
        lp = run.cfg.lpips
        run._ctx["lpips"] = alexnet_extractor(lp.get("weights_path"), lp.get("lin_path"), lp.get("seed", 0))
    return run._ctx["lpips"]


def stage_evaluate(run: Run, explained: dict, masks: dict, occluded: dict):
    """Curves, AUC, LPIPS per step and IoU; one JSON result per (sample, explainer, strategy)."""
    cfg = run.cfg
    model = run._ctx["classifier"]
    ex = _extractor(run)
    size = next(iter(explained.values()))["image"].shape[0] if explained else 0
    with _timed(run, "evaluate"):
        eval_key = [model.checkpoint_id, ex.fingerprint(), cfg.auc_abscissa]
        iou_dir = run.cache / f"evaluate-iou-{canonical_hash([_mask_dir(run).name, cfg.iou_binarization, cfg.iou_threshold])}"
        for (sid, e), (level_map, seq) in sorted(masks.items()):
            item = explained[sid]
            ip = iou_dir / sid / e / "iou.json"
            if item["gt"] is not None:
                hit = ip.exists()
                if not hit:
                    if cfg.iou_binarization == "levels":
                        ht = important_region(HeatmapLevels(level_map, np.full(cfg.k, np.nan), cfg.k, 0.0))
                    else:
                        ht = threshold_region(item["heatmaps"][e], cfg.iou_threshold)
                    value, info = iou(ht, item["gt"], return_info=True)
                    io.write_json(ip, {"sample": sid, "explainer": e, "iou": value, **info})
                run.count("evaluate", hit)
                run.emit(ip)
                run.results.append(str(ip.relative_to(run.output)))
            for kind in cfg.strategies:
                steps = occluded.get((sid, e, kind))
                if steps is None:
                    continue
                d = run.cache / f"evaluate-{kind}-{canonical_hash(eval_key + _strategy_key(run, kind, size))}"
                rp = d / sid / e / f"{kind}.json"
                try:
                    hit = rp.exists()
                    if not hit:
                        with _MODEL_LOCK:
                            probs = predict_batch(model, np.stack([item["image"]] + steps))
                        curve = curve_from_predictions(seq.occluded_fraction, probs, cfg.auc_abscissa == "step",
                                                       explainer=e, strategy=kind, sample_id=sid)
                        dist = lpips_batch(np.stack([item["image"]] * len(steps)), np.stack(steps), ex)
                        io.write_json(rp, {
                            "sample": sid, "explainer": e, "strategy": kind,
                            "p": list(curve.p), "f": list(curve.f), "auc": auc(curve),
                            "lpips": [float(v) for v in dist],
                        })
                    run.count("evaluate", hit)
                    run.emit(rp)
                    run.results.append(str(rp.relative_to(run.output)))
                except Exception as exc:
                    run.fail("evaluate", exc, sample=sid, explainer=e, strategy=kind)


# --------------------------------------------------------------------------
# pipeline


def run_pipeline(cfg: ExperimentConfig, output, resume: bool = False, stop_after: str = "report") -> dict:
    """Run every stage up to ``stop_after``; returns the manifest dict."""
    if stop_after not in STAGES:
        raise ConfigurationError(f"unknown stage {stop_after!r}")
    validate_run(cfg)
    run = Run(cfg, output, resume)
    run.output.mkdir(parents=True, exist_ok=True)
    order = STAGES.index(stop_after)
    try:
        stage_data(run)
        _stain(run)
        if order >= STAGES.index("classifier"):
            stage_classifier(run)
        if order >= STAGES.index("ddpm") and ("ibo" in cfg.strategies or stop_after == "ddpm"):
            stage_ddpm(run)
        if order >= STAGES.index("explain"):
            patches = select_samples(run)
            explained = stage_explain(run, patches)
            if order >= STAGES.index("mask"):
                masks = stage_mask(run, explained)
                if order >= STAGES.index("occlude"):
                    occluded = stage_occlude(run, explained, masks)
                    if order >= STAGES.index("evaluate"):
                        stage_evaluate(run, explained, masks, occluded)
    finally:
        run.write_manifest()
    manifest = run.manifest()
    if stop_after == "report":
        report(manifest, run.output)
        # the report files are artifacts of this run too
        run.artifacts.update(str(p.relative_to(run.output)) for p in (run.output / "report").rglob("*")
                             if p.is_file())
        run.write_manifest()
        manifest = run.manifest()
    return manifest


# --------------------------------------------------------------------------
# report


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.10g}"
    return v


def _write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    io.atomic_write_text(path, buf.getvalue())


def load_results(manifest: dict, output) -> tuple[list, list]:
    """Curve rows and IoU rows referenced by a manifest, in sorted order."""
    curves, ious = [], []
    for rel in sorted(manifest.get("results", [])):
        p = Path(output) / rel
        if not p.exists():
            continue
        r = io.read_json(p)
        (ious if p.name == "iou.json" else curves).append(r)
    return curves, ious


def summarize(curves: list, ious: list, explainers=None, strategies=None) -> dict:
    """Aggregate tables: mean AUC per explainer x strategy, LPIPS per strategy x step,
    IoU ranking, per-strategy rankings with MARD and rank precision."""
    from .metrics import mard, rank_methods, rank_precision

    explainers = explainers or sorted({r["explainer"] for r in curves} | {r["explainer"] for r in ious})
    strategies = strategies or sorted({r["strategy"] for r in curves})
    auc_tab = {}
    for s in strategies:
        for e in explainers:
            vals = [r["auc"] for r in curves if r["strategy"] == s and r["explainer"] == e]
            auc_tab[(e, s)] = (float(np.mean(vals)) if vals else float("nan"),
                               float(np.std(vals)) if vals else float("nan"), len(vals))
    n_steps = max((len(r["lpips"]) for r in curves), default=0)
    lpips_tab = {}
    for s in strategies:
        for i in range(n_steps):
            vals = [r["lpips"][i] for r in curves if r["strategy"] == s and len(r["lpips"]) > i]
            lpips_tab[(s, i + 1)] = (float(np.mean(vals)) if vals else float("nan"), len(vals))
    iou_tab = {}
    for e in explainers:
        vals = [r["iou"] for r in ious if r["explainer"] == e]
        iou_tab[e] = (float(np.mean(vals)) if vals else float("nan"), len(vals))
    gt = None
    iou_scores = {e: v[0] for e, v in iou_tab.items() if v[1]}
    if len(iou_scores) >= 2:
        gt = rank_methods(iou_scores, "descending", "iou-ground-truth")
    rankings = {}
    for s in strategies:
        scores = {e: auc_tab[(e, s)][0] for e in explainers if auc_tab[(e, s)][2]}
        if len(scores) < 2:
            continue
        oc = rank_methods(scores, "ascending", f"auc:{s}")
        entry = {"ranking": oc, "mard": None, "rank_precision": None}
        if gt is not None and set(gt.methods) == set(oc.methods):
            entry["mard"] = mard(gt, oc)
            entry["rank_precision"] = rank_precision(gt, oc)
        rankings[s] = entry
    return {"explainers": explainers, "strategies": strategies, "auc": auc_tab, "lpips": lpips_tab,
            "iou": iou_tab, "ground_truth": gt, "rankings": rankings, "n_steps": n_steps}


def _frac(fr):
    return None if fr is None else {"value": float(fr), "exact": f"{fr.numerator}/{fr.denominator}"}


def report(manifest: dict, output) -> Path:
    """Write tables, plots and galleries under ``<output>/report``."""
    output = Path(output)
    rdir = output / "report"
    if rdir.exists():
        shutil.rmtree(rdir)
    rdir.mkdir(parents=True)
    curves, ious = load_results(manifest, output)
    _write_reference_replay(rdir)
    if not curves and not ious:
        io.atomic_write_text(rdir / "NO_DATA", "no data: the manifest lists no completed results\n")
        io.write_json(rdir / "summary.json", {"status": "no data", "failures": manifest.get("failures", [])})
        return rdir
    cfg = manifest.get("config", {})
    explainers = [e for e in cfg.get("explainers", []) if any(r["explainer"] == e for r in curves + ious)] or None
    strategies = [s for s in cfg.get("strategies", []) if any(r["strategy"] == s for r in curves)] or None
    summ = summarize(curves, ious, explainers, strategies)

    # (per-row) metrics
    n = summ["n_steps"]
    header = (["sample", "explainer", "strategy", "auc"] + [f"p{i}" for i in range(n + 1)]
              + [f"f{i}" for i in range(n + 1)] + [f"lpips_step{i}" for i in range(1, n + 1)])
    rows = []
    for r in sorted(curves, key=lambda r: (r["sample"], r["explainer"], r["strategy"])):
        pad = n + 1 - len(r["p"])
        rows.append([r["sample"], r["explainer"], r["strategy"], r["auc"]] + r["p"] + [""] * pad
                    + r["f"] + [""] * pad + r["lpips"] + [""] * (n - len(r["lpips"])))
    _write_csv(rdir / "metrics.csv", header, rows)
    _write_csv(rdir / "iou.csv", ["sample", "explainer", "iou", "empty_union"],
               [[r["sample"], r["explainer"], r["iou"], r["empty_union"]]
                for r in sorted(ious, key=lambda r: (r["sample"], r["explainer"]))])

    # (b) AUC table with ranks per strategy
    rows = []
    for e in summ["explainers"]:
        row = [e]
        for s in summ["strategies"]:
            m, sd, cnt = summ["auc"][(e, s)]
            rk = summ["rankings"].get(s, {}).get("ranking")
            row += [m, sd, cnt, rk.ranks.get(e, "") if rk else ""]
        rows.append(row)
    header = ["explainer"] + [f"{s}_{c}" for s in summ["strategies"] for c in ("auc_mean", "auc_std", "n", "rank")]
    _write_csv(rdir / "auc_table.csv", header, rows)

    # (a) LPIPS by strategy and mask step
    _write_csv(rdir / "lpips_table.csv", ["strategy"] + [f"mask{i}" for i in range(1, n + 1)],
               [[s] + [summ["lpips"][(s, i)][0] for i in range(1, n + 1)] for s in summ["strategies"]])

    # (c) IoU ground truth
    gt = summ["ground_truth"]
    _write_csv(rdir / "iou_table.csv", ["explainer", "iou_mean", "n", "rank"],
               [[e, summ["iou"][e][0], summ["iou"][e][1], gt.ranks.get(e, "") if gt else ""]
                for e in summ["explainers"]])

    # (d) MARD and rank precision
    mrows = []
    for s in summ["strategies"]:
        ent = summ["rankings"].get(s)
        if not ent or ent["mard"] is None:
            mrows.append([s, "", "", "", ""])
            continue
        mrows.append([s, float(ent["mard"]), str(ent["mard"]), float(ent["rank_precision"]),
                      str(ent["rank_precision"])])
    _write_csv(rdir / "mard_table.csv", ["strategy", "mard", "mard_exact", "rank_precision",
                                         "rank_precision_exact"], mrows)

    summary = {
        "status": "ok",
        "n_samples": len({r["sample"] for r in curves + ious}),
        "auc": {s: {e: summ["auc"][(e, s)][0] for e in summ["explainers"]} for s in summ["strategies"]},
        "lpips": {s: [summ["lpips"][(s, i)][0] for i in range(1, n + 1)] for s in summ["strategies"]},
        "iou": {e: summ["iou"][e][0] for e in summ["explainers"]},
        "iou_ranking": gt.ranks if gt else None,
        "rankings": {s: {"ranks": ent["ranking"].ranks, "ties": ent["ranking"].ties,
                         "mard": _frac(ent["mard"]), "rank_precision": _frac(ent["rank_precision"])}
                     for s, ent in summ["rankings"].items()},
        "gaps": _gaps(summ),
        "skipped": manifest.get("skipped", []),
        "failures": manifest.get("failures", []),
    }
    io.write_json(rdir / "summary.json", json.loads(json.dumps(summary, default=_nan_none), parse_constant=lambda c: None))

    # (e) curves, (f) galleries
    plot_curves(curves, summ, rdir)
    plot_galleries(manifest, output, rdir)
    return rdir


def _nan_none(o):
    return None


def _gaps(summ) -> list:
    gaps = []
    for (e, s), (_, _, cnt) in summ["auc"].items():
        if cnt == 0:
            gaps.append({"explainer": e, "strategy": s, "missing": "auc"})
    return gaps


def _write_reference_replay(rdir: Path):
    from .metrics import replay_reference_tables

    rep = replay_reference_tables()
    rows = [[s, float(v["mard"]), str(v["mard"]), float(v["rank_precision"]), str(v["rank_precision"])]
            for s, v in rep["strategies"].items()]
    _write_csv(rdir / "reference_replay.csv",
               ["strategy", "mard", "mard_exact", "rank_precision", "rank_precision_exact"], rows)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_curves(curves, summ, rdir: Path):
    """One figure per strategy; one series per explainer (mean p vs mean f, std band).

    Returns the number of series drawn per strategy.
    """
    plt = _pyplot()
    drawn = {}
    for s in summ["strategies"]:
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for e in summ["explainers"]:
            rs = [r for r in curves if r["strategy"] == s and r["explainer"] == e]
            if not rs:
                continue
            L = min(len(r["p"]) for r in rs)
            p = np.mean([r["p"][:L] for r in rs], axis=0)
            f = np.array([r["f"][:L] for r in rs])
            ax.plot(p, f.mean(0), marker="o", label=e)
            drawn[s] = drawn.get(s, 0) + 1
            ax.fill_between(p, f.mean(0) - f.std(0), f.mean(0) + f.std(0), alpha=0.15)
        ax.set_xlabel("occluded fraction p")
        ax.set_ylabel("tumor probability f(p)")
        ax.set_title(s)
        ax.set_ylim(-0.05, 1.05)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(rdir / f"curves_{s}.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
    return drawn


def plot_galleries(manifest, output, rdir: Path):
    """Rows = strategies, columns = original + occlusion steps, for the first explainer."""
    from PIL import Image as PILImage

    cfg = manifest.get("config", {})
    samples = manifest.get("samples", [])[: cfg.get("gallery_samples", 3)]
    arts = manifest.get("artifacts", [])
    for sid in samples:
        for e in cfg.get("explainers", [])[:1]:
            rows = []
            for s in cfg.get("strategies", []):
                steps = sorted(a for a in arts if f"/{sid}/{e}/{s}/step" in a and a.endswith(".png"))
                if not steps:
                    continue
                orig = [a for a in arts if a.endswith(f"/{sid}/image.png")]
                tiles = [io.read_image(Path(output) / orig[0])] if orig else []
                tiles += [io.read_image(Path(output) / a) for a in steps]
                rows.append(np.concatenate(tiles, axis=1))
            if not rows:
                continue
            width = max(r.shape[1] for r in rows)
            rows = [np.pad(r, ((0, 0), (0, width - r.shape[1]), (0, 0)), constant_values=1.0) for r in rows]
            PILImage.fromarray(io.to_uint8(np.concatenate(rows, axis=0))).save(
                rdir / f"gallery_{sid}_{e}.png", compress_level=6)

"""Run-directory orchestration: one function per CLI command.

Layout of a run directory::

    config.ini                         config snapshot (written by prepare-data)
    data/classification.csv            manifest incl. split and region columns
    data/inpainting.csv                manifest of flip-augmented inpainting pairs
    data/{images,masks,regions}/*.png
    inpainting/<arch>/{best,last}.npz, log.csv
    classifier/<arch>/<mode>/best.npz, metrics.csv
    embeddings/<arch>_{frozen,refined}.csv
    clustering/clustering.csv, <arch>_<variant>_<method>.png
    gradcam/<arch>/<mode>/e<epoch>_id<class>.png
    ablation/ablation.csv, ablation.txt
    report/...
    .done/<command>                    completion markers
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Sequence

from . import gradcam as gc
from .ablation import AblationTable, run_ablation, write_ablation_report
from .analytics import evaluate_embeddings, project2d, scatter_png, write_cluster_csv
from .classifier import ClassifierSchedule, attach_head, load_classifier, save_classifier, train_classifier
from .config import ExperimentConfig
from .data import (
    DatasetSplits, ManifestRecord, RegionMaskSet, build_classification_dataset, build_inpainting_dataset,
    class_count, load_mask_png, load_record, read_manifest, resolve, save_image_png, save_mask_png, write_manifest,
)
from .encoder import embed_dataset, isolate_encoder
from .errors import ConfigError, DataError, PrerequisiteError
from .inpainting.models import ARCHS, ArchitectureConfig, build_model, load_checkpoint
from .inpainting.train import InpaintSchedule, train_inpainting
from .synthetic import generate_dataset

log = logging.getLogger(__name__)

REGION_NAMES = ("background", "fish", "pattern")


class RunDirectory:
    def __init__(self, root):
        self.root = Path(root)

    def __truediv__(self, other) -> Path:
        return self.root / other

    @property
    def config_path(self) -> Path:
        return self.root / "config.ini"

    def inpaint_ckpt(self, arch) -> Path:
        return self.root / "inpainting" / arch / "best.npz"

    def classifier_dir(self, arch, mode) -> Path:
        return self.root / "classifier" / arch / mode

    def mark(self, command: str, **info):
        path = self.root / ".done" / command
        path.parent.mkdir(parents=True, exist_ok=True)
        old = json.loads(path.read_text()) if path.exists() else {}
        for key, value in info.items():
            if isinstance(value, list) and isinstance(old.get(key), list):
                value = sorted(set(old[key]) | set(value))
            old[key] = value
        path.write_text(json.dumps(old, sort_keys=True) + "\n")

    def done(self, command: str) -> bool:
        return (self.root / ".done" / command).exists()

    def require(self, path: Path, producer: str):
        if not Path(path).exists():
            raise PrerequisiteError(str(path), producer)


def _safe(source_id: str) -> str:
    return source_id.replace("#", "_").replace("/", "_")


# ------------------------------------------------------------------ prepare-data

def _load_source(cfg: ExperimentConfig):
    """(classification samples, regions or None, split names or None, inpainting samples, inpaint splits or None)."""
    d = cfg.data
    if d.source == "synthetic":
        ds = generate_dataset(d.n_individuals, d.n_per_individual, cfg.seed, d.image_size, d.n_inpaint_per_individual)
        return ds.classification, ds.regions, None, ds.inpainting, None
    path = Path(d.classification_manifest)
    records = read_manifest(path)
    samples, regions, splits = [], [], []
    for r in records:
        samples.append(load_record(r, path.parent))
        splits.append(r.split or None)
        if r.regions:
            masks = {k: load_mask_png(resolve(path.parent, r.regions[k])) for k in REGION_NAMES if k in r.regions}
            regions.append(RegionMaskSet(**masks) if len(masks) == 3 else None)
        else:
            regions.append(None)
    regions = regions if all(r is not None for r in regions) else None
    splits = splits if all(splits) else None
    inpaint, isplits = [], None
    if d.inpainting_manifest:
        ipath = Path(d.inpainting_manifest)
        irecords = read_manifest(ipath)
        inpaint = [load_record(r, ipath.parent) for r in irecords]
        if all(r.split for r in irecords):
            isplits = [r.split for r in irecords]
    return samples, regions, splits, inpaint, isplits


def _from_named(samples, names, seed, ratios) -> DatasetSplits:
    parts = {"train": [], "val": [], "test": []}
    for s, n in zip(samples, names):
        if n not in parts:
            raise DataError(f"unknown split {n!r} for {s.source_id!r}; valid: train, val, test")
        parts[n].append(s)
    return DatasetSplits(parts["train"], parts["val"], parts["test"], seed, ratios)


def _write_split_manifest(run: RunDirectory, name: str, splits: DatasetSplits, regions_by_id=None):
    data = run / "data"
    records = []
    for split, samples in splits.named().items():
        for s in samples:
            sid = _safe(s.source_id)
            img = f"images/{sid}.png"
            save_image_png(data / img, s.image)
            mask = ""
            if s.mask.any():
                mask = f"masks/{sid}.png"
                save_mask_png(data / mask, s.mask)
            regions = {}
            if regions_by_id is not None:
                rs = regions_by_id[s.source_id]
                for k in REGION_NAMES:
                    regions[k] = f"regions/{sid}_{k}.png"
                    save_mask_png(data / regions[k], getattr(rs, k))
            records.append(ManifestRecord(img, mask, s.label, s.source_id, split, regions))
    write_manifest(data / f"{name}.csv", records)
    return records


def prepare_data(cfg: ExperimentConfig, root) -> dict:
    run = RunDirectory(root)
    (run / "data" / "images").mkdir(parents=True, exist_ok=True)
    cfg.save(run.config_path)
    samples, regions, names, inpaint, inames = _load_source(cfg)
    csplits = (_from_named(samples, names, cfg.seed, (0.8, 0.1, 0.1)) if names
               else build_classification_dataset(samples, cfg.seed))
    by_id = {s.source_id: r for s, r in zip(samples, regions)} if regions is not None else None
    crec = _write_split_manifest(run, "classification", csplits, by_id)
    counts = {"classification": len(crec)}
    if inpaint:
        isplits = (_from_named(inpaint, inames, cfg.seed, (0.8, 0.16, 0.04)) if inames
                   else build_inpainting_dataset(inpaint, cfg.seed))
        counts["inpainting"] = len(_write_split_manifest(run, "inpainting", isplits))
    run.mark("prepare-data", seed=cfg.seed, **counts)
    log.info("prepared data: %s", counts)
    return counts


def load_splits(run: RunDirectory, name: str, with_regions: bool = False):
    path = run / "data" / f"{name}.csv"
    run.require(path, "prepare-data")
    parts = {"train": [], "val": [], "test": []}
    regions = {}
    for r in read_manifest(path):
        s = load_record(r, path.parent)
        parts[r.split].append(s)
        if with_regions and r.regions:
            regions[s.source_id] = RegionMaskSet(
                **{k: load_mask_png(resolve(path.parent, r.regions[k])) for k in REGION_NAMES})
    splits = DatasetSplits(parts["train"], parts["val"], parts["test"], None, None)
    return (splits, regions) if with_regions else splits


# ------------------------------------------------------------------ training

def _archs(cfg, archs):
    archs = list(archs or cfg.experiment.archs)
    for a in archs:
        if a not in ARCHS:
            raise ConfigError(f"unknown arch {a!r}; valid options: {', '.join(ARCHS)}")
    return archs


def train_inpaint(cfg: ExperimentConfig, root, archs: Optional[Sequence[str]] = None) -> dict:
    run = RunDirectory(root)
    splits = load_splits(run, "inpainting")
    if not splits.train or not splits.val:
        raise DataError("inpainting manifest needs train and val pairs")
    sched = InpaintSchedule(cfg.inpainting.epochs, cfg.inpainting.batch_size, cfg.inpainting.lr,
                            val_every=cfg.inpainting.val_every)
    best = {}
    for arch in _archs(cfg, archs):
        acfg = ArchitectureConfig(arch, cfg.experiment.base_channels, loss_weights=cfg.loss_weights.get(arch, {}))
        model = build_model(arch, acfg, cfg.seed)
        out = run / "inpainting" / arch
        tlog = train_inpainting(model, splits, sched, cfg.seed, checkpoint_dir=out)
        tlog.to_csv(out / "log.csv")
        best[arch] = tlog.best_checkpoint
        run.mark("train-inpaint", archs=[arch])
    return best


def _examples(samples, k):
    """First sample of each class, for GradCAM."""
    seen = {}
    for s in samples:
        if s.label is not None and s.label not in seen:
            seen[s.label] = s
    return [(seen[c].image, c) for c in sorted(seen)][:k]


def train_classifiers(cfg: ExperimentConfig, root, archs=None, modes=None) -> dict:
    run = RunDirectory(root)
    splits = load_splits(run, "classification")
    k = class_count([*splits.train, *splits.val, *splits.test])
    examples = _examples(splits.test or splits.val or splits.train, k)
    out = {}
    for arch in _archs(cfg, archs):
        ckpt = run.inpaint_ckpt(arch)
        run.require(ckpt, "train-inpaint")
        encoder = isolate_encoder(load_checkpoint(ckpt)[0])
        for mode in modes or cfg.classification.modes:
            lr = cfg.classification.lr_shallow if mode == "shallow" else cfg.classification.lr_deep
            sched = ClassifierSchedule(cfg.classification.epochs, cfg.classification.batch_size, lr)
            hook = None
            if cfg.classification.gradcam_each_epoch:
                hook = gc.epoch_hook(examples, run.root, arch, mode, cfg.gradcam.layer or None, cfg.gradcam.alpha)
            clf = attach_head(encoder, k, seed=cfg.seed)
            hist = train_classifier(clf, splits, mode, sched, cfg.seed, on_epoch=hook, track_test=True)
            d = run.classifier_dir(arch, mode)
            d.mkdir(parents=True, exist_ok=True)
            save_classifier(d / "best.npz", clf, {"best_epoch": hist.best_epoch})
            hist.to_csv(d / "metrics.csv")
            out[(arch, mode)] = hist
            run.mark("train-classifier", runs=[f"{arch}/{mode}"])
    return out


def gradcam_overlays(cfg: ExperimentConfig, root, archs=None, modes=None) -> list:
    run = RunDirectory(root)
    splits = load_splits(run, "classification")
    written = []
    for arch in _archs(cfg, archs):
        for mode in modes or cfg.classification.modes:
            ckpt = run.classifier_dir(arch, mode) / "best.npz"
            run.require(ckpt, "train-classifier")
            clf, meta = load_classifier(ckpt)
            for image, label in _examples(splits.test or splits.val or splits.train, clf.n_classes):
                hm = gc.gradcam(clf, image, label, cfg.gradcam.layer or None, meta.get("best_epoch", 0))
                path = gc.overlay_path(run.root, arch, mode, hm.epoch, hm.target_class)
                gc.save_overlay(path, hm, image, cfg.gradcam.alpha)
                written.append(path)
    run.mark("gradcam", count=len(written))
    return written


# ------------------------------------------------------------------ analytics / ablation

def cluster_eval(cfg: ExperimentConfig, root, archs=None) -> list:
    """Clustering metrics of test-set embeddings, frozen (after inpainting) and refined (after fine-tuning)."""
    run = RunDirectory(root)
    splits = load_splits(run, "classification")
    samples = splits.test or splits.val
    if not samples:
        raise DataError("cluster-eval needs a non-empty test (or val) split")
    mode = cfg.analytics.refined_mode
    reports = []
    (run / "embeddings").mkdir(parents=True, exist_ok=True)
    (run / "clustering").mkdir(parents=True, exist_ok=True)
    for arch in _archs(cfg, archs):
        ckpt = run.inpaint_ckpt(arch)
        run.require(ckpt, "train-inpaint")
        cckpt = run.classifier_dir(arch, mode) / "best.npz"
        run.require(cckpt, "train-classifier")
        frozen = isolate_encoder(load_checkpoint(ckpt)[0])
        refined = load_classifier(cckpt)[0].encoder
        for name, enc in ((arch, frozen), (f"ref-{arch}", refined)):
            variant = "refined" if name.startswith("ref-") else "frozen"
            emb = embed_dataset(enc, samples)
            emb.to_csv(run / "embeddings" / f"{arch}_{variant}.csv")
            reports.append(evaluate_embeddings(emb, cfg.analytics.k, cfg.seed, name, cfg.analytics.standardize))
            for method in cfg.analytics.projections:
                proj = project2d(emb, method, seed=cfg.seed)
                scatter_png(run / "clustering" / f"{arch}_{variant}_{method}.png", proj, emb.labels,
                            f"{name} ({method})")
    write_cluster_csv(run / "clustering" / "clustering.csv", reports)
    run.mark("cluster-eval", archs=list(_archs(cfg, archs)))
    return reports


def ablate(cfg: ExperimentConfig, root) -> AblationTable:
    run = RunDirectory(root)
    splits, regions = load_splits(run, "classification", with_regions=True)
    if cfg.ablation.source == "test":
        samples = list(splits.test)
    else:
        samples = [s for part in splits for s in part]
    missing = [s.source_id for s in samples if s.source_id not in regions]
    if missing:
        raise DataError(f"ablation needs region masks; none for {missing[0]!r} "
                        "(manifest columns background_path, fish_path, pattern_path)")
    backbones = {b: (None if b == "baseline" else run.inpaint_ckpt(b)) for b in cfg.ablation.backbones}
    sched = ClassifierSchedule(cfg.ablation.epochs or cfg.classification.epochs, cfg.classification.batch_size)
    table = run_ablation(backbones, cfg.ablation.modes, samples, [regions[s.source_id] for s in samples], sched,
                         cfg.seed, cfg.ablation.per_class, cfg.ablation.conditions)
    write_ablation_report(table, run / "ablation")
    run.mark("ablate", skipped=sorted(table.skipped))
    return table


def run_all(cfg: ExperimentConfig, root):
    prepare_data(cfg, root)
    train_inpaint(cfg, root)
    train_classifiers(cfg, root)
    gradcam_overlays(cfg, root)
    cluster_eval(cfg, root)
    ablate(cfg, root)
    from .report import build_report
    return build_report(root)


def load_config(path=None, root=None) -> ExperimentConfig:
    """Explicit file, else the run's snapshot, else defaults."""
    if path:
        return ExperimentConfig.load(path)
    if root and (Path(root) / "config.ini").exists():
        return ExperimentConfig.load(Path(root) / "config.ini")
    return ExperimentConfig()

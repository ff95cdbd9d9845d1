"""Region-ablation grid: which image regions carry the identity signal."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .classifier import ClassifierSchedule, attach_head, train_classifier
from .data import CLASSIFY_RATIOS, RegionMaskSet, Sample, build_classification_dataset, class_count
from .encoder import Encoder, build_encoder, isolate_encoder
from .errors import ConfigError, DataError
from .inpainting.models import load_checkpoint

log = logging.getLogger(__name__)

CONDITIONS = ("background", "fish", "pattern", "no_background", "no_fish", "no_pattern", "all")
COLUMNS = {
    "background": "Background", "fish": "Fish", "pattern": "Pattern",
    "no_background": "No background", "no_fish": "No fish", "no_pattern": "No pattern", "all": "All",
}
GROUPS = (("background", "fish", "pattern"), ("no_background", "no_fish", "no_pattern"))
MODES = ("shallow", "deep")


def visible_mask(regions: RegionMaskSet, condition: str) -> np.ndarray:
    """Boolean H x W set of pixels left visible under ``condition``."""
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition {condition!r}; valid: {', '.join(CONDITIONS)}")
    if condition == "all":
        return np.ones(regions.shape, bool)
    if condition.startswith("no_"):
        return ~getattr(regions, condition[3:]).astype(bool)
    return getattr(regions, condition).astype(bool)


def region_ablate(image: np.ndarray, regions: RegionMaskSet, condition: str) -> np.ndarray:
    """Zero every pixel not visible under ``condition``; visible pixels are copied unchanged."""
    keep = visible_mask(regions, condition)
    if keep.shape != image.shape[:2]:
        raise DataError(f"region masks {keep.shape} do not match image {image.shape[:2]}")
    if condition == "all":
        return np.array(image, copy=True)
    return np.where(keep[..., None], image, np.zeros((), dtype=image.dtype))


@dataclass
class AblationSpec:
    condition: str
    backbone: str
    mode: str

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition!r}; valid: {', '.join(CONDITIONS)}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; valid: {', '.join(MODES)}")


@dataclass
class AblationTable:
    accuracy: dict = field(default_factory=dict)   # (backbone, mode, condition) -> accuracy
    skipped: dict = field(default_factory=dict)    # backbone -> reason
    backbones: list = field(default_factory=list)
    modes: list = field(default_factory=list)

    def row(self, backbone, mode) -> list:
        return [self.accuracy.get((backbone, mode, c)) for c in CONDITIONS]

    def rows(self):
        for mode in self.modes:
            for b in self.backbones:
                yield b, mode, self.row(b, mode)

    def is_complete(self) -> bool:
        return all((b, m, c) in self.accuracy for b in self.backbones for m in self.modes for c in CONDITIONS)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["backbone", "mode", *(COLUMNS[c] for c in CONDITIONS)])
            for b, mode, vals in self.rows():
                w.writerow([b, mode, *("" if v is None else repr(float(v)) for v in vals)])

    @classmethod
    def from_csv(cls, path) -> "AblationTable":
        table = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                b, m = rec["backbone"], rec["mode"]
                if b not in table.backbones:
                    table.backbones.append(b)
                if m not in table.modes:
                    table.modes.append(m)
                for c in CONDITIONS:
                    if rec[COLUMNS[c]]:
                        table.accuracy[(b, m, c)] = float(rec[COLUMNS[c]])
        return table


def mark_row(values: Sequence[Optional[float]]) -> dict:
    """condition -> set of marks ("bold" best, "italic" worst) inside each region group.

    Ties mark every tied cell. ``all`` is only marked when the whole row is constant.
    """
    vals = dict(zip(CONDITIONS, values))
    marks = {c: set() for c in CONDITIONS}
    for group in GROUPS:
        present = [c for c in group if vals[c] is not None]
        if not present:
            continue
        hi = max(vals[c] for c in present)
        lo = min(vals[c] for c in present)
        for c in present:
            if vals[c] == hi:
                marks[c].add("bold")
            if vals[c] == lo:
                marks[c].add("italic")
    filled = [v for v in values if v is not None]
    if len(filled) == len(CONDITIONS) and len(set(filled)) == 1:
        marks["all"] = {"bold", "italic"}
    return marks


def _fmt(v, marks) -> str:
    s = "-" if v is None else f"{v:.2f}"
    if "bold" in marks:
        s = f"**{s}**"
    if "italic" in marks:
        s = f"*{s}*"
    return s


def render_ablation_report(table: AblationTable) -> str:
    """Plain-text (markdown) tables per mode: **bold** best, *italic* worst; skipped backbones in a footer."""
    out = []
    header = ["Algorithm", *(COLUMNS[c] for c in CONDITIONS)]
    for mode in table.modes:
        out.append(f"{mode} fine-tuning")
        out.append("")
        out.append("| " + " | ".join(header) + " |")
        out.append("|" + "---|" * len(header))
        for b in table.backbones:
            if b in table.skipped:
                continue
            vals = table.row(b, mode)
            marks = mark_row(vals)
            out.append("| " + " | ".join([b, *(_fmt(v, marks[c]) for v, c in zip(vals, CONDITIONS))]) + " |")
        out.append("")
    for b, reason in table.skipped.items():
        out.append(f"skipped {b}: {reason}")
    return "\n".join(out).rstrip() + "\n"


def write_ablation_report(table: AblationTable, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "ablation.csv")
    (out_dir / "ablation.txt").write_text(render_ablation_report(table), encoding="utf-8")


def subsample_per_class(samples, regions, per_class: Optional[int], seed: int):
    """At most ``per_class`` samples per label (all when None), keeping regions aligned."""
    if per_class is None:
        return list(samples), list(regions)
    rng = np.random.default_rng([seed, 300])
    labels = np.array([s.label for s in samples])
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = min(per_class, len(idx))
        keep.extend(sorted(rng.choice(idx, n, replace=False).tolist()))
    keep.sort()
    return [samples[i] for i in keep], [regions[i] for i in keep]


def _resolve_backbone(name, source, seed) -> tuple[Optional[Encoder], str]:
    if isinstance(source, Encoder):
        return source, ""
    if name == "baseline" and source is None:
        return build_encoder("baseline", seed=seed), ""
    if source is None:
        return None, "no inpainting checkpoint given"
    path = Path(source)
    if not path.exists():
        return None, f"missing checkpoint {path}"
    model, _ = load_checkpoint(path)
    return isolate_encoder(model), ""


def run_ablation(backbones: dict, modes: Sequence[str], samples: Sequence[Sample], regions,
                 schedule: Optional[ClassifierSchedule] = None, seed: int = 0, per_class: Optional[int] = 300,
                 conditions: Sequence[str] = CONDITIONS, ratios=CLASSIFY_RATIOS, progress=None) -> AblationTable:
    """Fine-tune a fresh head (and encoder in deep mode) per (backbone, mode, condition) cell.

    ``backbones`` maps a name to an Encoder, an inpainting checkpoint path, or
    None (only meaningful for ``baseline``, a CNN trained from scratch).
    ``regions`` is one RegionMaskSet per sample or a single shared one.
    Each cell reports test accuracy; all cells share the same split.
    """
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}; valid: {', '.join(MODES)}")
    for c in conditions:
        if c not in CONDITIONS:
            raise ConfigError(f"unknown condition {c!r}; valid: {', '.join(CONDITIONS)}")
    if isinstance(regions, RegionMaskSet):
        regions = [regions] * len(samples)
    if len(regions) != len(samples):
        raise DataError(f"{len(regions)} region sets for {len(samples)} samples")
    samples, regions = subsample_per_class(list(samples), list(regions), per_class, seed)
    k = class_count(samples)
    table = AblationTable(backbones=list(backbones), modes=list(modes))
    encoders = {}
    for name, source in backbones.items():
        enc, reason = _resolve_backbone(name, source, seed)
        if enc is None:
            table.skipped[name] = reason
            log.warning("ablation: skipping %s (%s)", name, reason)
        else:
            encoders[name] = enc
    for cond in conditions:
        ablated = [s.with_image(region_ablate(s.image, r, cond)) for s, r in zip(samples, regions)]
        splits = build_classification_dataset(ablated, seed, ratios)
        for mode in modes:
            for name, enc in encoders.items():
                clf = attach_head(enc, k, seed=seed)
                hist = train_classifier(clf, splits, mode, schedule, seed=seed)
                acc = hist.test.accuracy if hist.test is not None else float("nan")
                table.accuracy[(name, mode, cond)] = acc
                log.info("ablation %s/%s/%s: %.3f", name, mode, cond, acc)
                if progress:
                    progress(AblationSpec(cond, name, mode), acc)
    return table

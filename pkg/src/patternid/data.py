"""Paired image/mask(/label) datasets: masking, flips, splits, manifests and PNG io.

Images are float arrays of shape (H, W, C) in [0, 1]; masks are (H, W) arrays
holding 0/1, where 1 marks the region to inpaint or occlude.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DataError

INPAINT_RATIOS = (0.8, 0.16, 0.04)
CLASSIFY_RATIOS = (0.8, 0.1, 0.1)
SPLIT_NAMES = ("train", "val", "test")
MANIFEST_FIELDS = ["image_path", "mask_path", "label", "source_id", "split"]
REGION_FIELDS = ["background_path", "fish_path", "pattern_path"]


def validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise DataError(f"image must have shape (H, W, C) with C in {{1, 3}}, got {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise DataError(f"image has an empty spatial dimension: {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise DataError("image values must be finite and within [0, 1]")
    return image


def validate_mask(mask: np.ndarray, image_shape: Optional[tuple] = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must have shape (H, W), got {mask.shape}")
    if image_shape is not None and tuple(mask.shape) != tuple(image_shape[:2]):
        raise DataError(f"shape mismatch: image {tuple(image_shape)} vs mask {tuple(mask.shape)}")
    if not np.all((mask == 0) | (mask == 1)):
        raise DataError("mask must be binary (every entry 0 or 1)")
    return mask


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    mask: np.ndarray
    label: Optional[int] = None
    source_id: str = ""

    def __post_init__(self):
        image = validate_image(self.image)
        mask = validate_mask(self.mask, image.shape)
        object.__setattr__(self, "image", _frozen(image))
        object.__setattr__(self, "mask", _frozen(mask.astype(np.float32)))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    def with_image(self, image: np.ndarray) -> "Sample":
        return Sample(image, self.mask, self.label, self.source_id)


@dataclass(frozen=True)
class DatasetSplits:
    train: tuple
    val: tuple
    test: tuple
    split_seed: int
    ratios: tuple = field(default=CLASSIFY_RATIOS)

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    def named(self):
        return dict(zip(SPLIT_NAMES, (self.train, self.val, self.test)))

    def sizes(self):
        return tuple(len(s) for s in self)


@dataclass(frozen=True, eq=False)
class RegionMaskSet:
    """Background / fish / pattern masks of one image (1 = pixel belongs to the region).

    Fish and pattern may overlap (the pattern lies on the body); background is
    disjoint from both and the three together cover the image.
    """

    background: np.ndarray
    fish: np.ndarray
    pattern: np.ndarray

    def __post_init__(self):
        shape = np.asarray(self.background).shape
        for name in ("background", "fish", "pattern"):
            m = validate_mask(getattr(self, name))
            if m.shape != shape:
                raise DataError(f"region {name} has shape {m.shape}, expected {shape}")
            object.__setattr__(self, name, _frozen(m.astype(np.float32)))
        if np.any(self.background * self.fish) or np.any(self.background * self.pattern):
            raise DataError("background region overlaps the fish or pattern region")
        if not np.all(np.maximum(self.background, np.maximum(self.fish, self.pattern)) == 1):
            raise DataError("regions do not cover every pixel")

    @property
    def shape(self):
        return self.background.shape


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the masked region: ``image * (1 - mask)`` broadcast over channels."""
    image = validate_image(image)
    mask = validate_mask(mask, image.shape)
    keep = mask == 0
    out = np.zeros_like(image)
    out[keep] = image[keep]
    return out


def concat_mask_channel(masked_image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked_image = validate_image(masked_image)
    mask = validate_mask(mask, masked_image.shape)
    return np.concatenate([masked_image, mask[..., None].astype(masked_image.dtype)], axis=2)


def complement(mask: np.ndarray) -> np.ndarray:
    return (1 - validate_mask(mask)).astype(np.asarray(mask).dtype)


_FLIPS = (
    ("", lambda a: a),
    ("h", lambda a: a[:, ::-1]),
    ("v", lambda a: a[::-1, :]),
    ("hv", lambda a: a[::-1, ::-1]),
)


def flip_augment(sample: Sample) -> list[Sample]:
    """Original plus horizontal, vertical and combined flips, in that order."""
    out = []
    for tag, flip in _FLIPS:
        sid = f"{sample.source_id}#{tag}" if tag else sample.source_id
        out.append(Sample(np.ascontiguousarray(flip(sample.image)),
                          np.ascontiguousarray(flip(sample.mask)), sample.label, sid))
    return out


def group_of(source_id: str) -> str:
    """Source image a (possibly flipped) sample came from."""
    return source_id.split("#", 1)[0]


def _check_ratios(ratios: Sequence[float]) -> tuple:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    return ratios


def _allocate(class_sizes: Sequence[int], ratios: tuple) -> list[tuple[int, int, int]]:
    # Cumulative rounding: global val/test totals equal round(ratio * N) and every
    # class stays within one item of its own quota.
    out = []
    cum = prev_val = prev_test = 0
    for n in class_sizes:
        cum += n
        val = int(np.floor(ratios[1] * cum + 0.5))
        test = int(np.floor(ratios[2] * cum + 0.5))
        v, t = val - prev_val, test - prev_test
        v, t = max(v, 0), max(t, 0)
        if v + t > n:
            t = max(n - v, 0)
            v = n - t
        out.append((n - v - t, v, t))
        prev_val += v
        prev_test += t
    return out


def _coerce_pairs(pairs) -> list[Sample]:
    samples = []
    for i, p in enumerate(pairs):
        if isinstance(p, Sample):
            samples.append(p)
            continue
        image, mask, *rest = p
        sid = rest[0] if rest else f"pair{i:05d}"
        samples.append(Sample(image, mask, None, sid))
    return samples


def _check_unique(samples: Sequence[Sample]):
    seen = set()
    for s in samples:
        if s.source_id in seen:
            raise DataError(f"duplicate source_id {s.source_id!r}")
        seen.add(s.source_id)


def build_inpainting_dataset(pairs, seed: int, ratios=INPAINT_RATIOS) -> DatasetSplits:
    """Flip-augment, drop labels and split by source image (flips never straddle splits)."""
    ratios = _check_ratios(ratios)
    samples = _coerce_pairs(pairs)
    if not samples:
        raise DataError("no inpainting pairs given")
    _check_unique(samples)
    for s in samples:
        if s.mask.sum() < 1:
            raise DataError(f"inpainting mask of {s.source_id!r} is empty")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train, n_val, _ = _allocate([len(samples)], ratios)[0]
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    splits = []
    for idx in parts:
        split = []
        for i in idx:
            s = samples[i]
            split.extend(flip_augment(Sample(s.image, s.mask, None, s.source_id)))
        splits.append(tuple(split))
    return DatasetSplits(*splits, split_seed=seed, ratios=ratios)


def build_classification_dataset(samples, seed: int, ratios=CLASSIFY_RATIOS) -> DatasetSplits:
    """Pair each labelled image with an empty mask and split stratified by label.

    ``samples`` holds ``(image, label)`` or ``(image, label, source_id)`` tuples,
    or labelled :class:`Sample` objects (their masks are replaced by zeros).
    """
    ratios = _check_ratios(ratios)
    items = []
    for i, s in enumerate(samples):
        if isinstance(s, Sample):
            image, label, sid = s.image, s.label, s.source_id
        else:
            image, label, *rest = s
            sid = rest[0] if rest else f"img{i:05d}"
        if label is None:
            raise DataError(f"classification sample {sid!r} has no label")
        image = validate_image(image)
        items.append(Sample(image, np.zeros(image.shape[:2], np.float32), int(label), sid))
    if not items:
        raise DataError("no classification samples given")
    _check_unique(items)
    labels = sorted({s.label for s in items})
    k = labels[-1] + 1
    if labels[0] < 0:
        raise DataError(f"labels must be non-negative, got {labels[0]}")
    missing = sorted(set(range(k)) - set(labels))
    if missing:
        raise DataError(f"labels are not contiguous: class {missing[0]} has no samples")
    rng = np.random.default_rng(seed)
    by_class = [[i for i, s in enumerate(items) if s.label == c] for c in range(k)]
    by_class = [[idx[j] for j in rng.permutation(len(idx))] for idx in by_class]
    splits = ([], [], [])
    for idx, (n_tr, n_va, _) in zip(by_class, _allocate([len(i) for i in by_class], ratios)):
        for part, sel in zip(splits, (idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:])):
            part.extend(sel)
    out = [tuple(items[part[j]] for j in rng.permutation(len(part))) for part in splits]
    return DatasetSplits(*out, split_seed=seed, ratios=ratios)


def class_count(samples: Iterable[Sample]) -> int:
    return max(s.label for s in samples) + 1


# --------------------------------------------------------------------------- io

def save_image_png(path, image: np.ndarray):
    image = validate_image(image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    a = np.round(image * 255.0).astype(np.uint8)
    Image.fromarray(a[..., 0] if a.shape[2] == 1 else a).save(path)


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im.convert("L") if im.mode in ("L", "I", "1") else im.convert("RGB"))
    if a.ndim == 2:
        a = a[..., None]
    return a.astype(np.float32) / 255.0


def save_mask_png(path, mask: np.ndarray):
    mask = validate_mask(mask)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask * 255).astype(np.uint8)).save(path)


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im.convert("L"))
    return (a > 127).astype(np.float32)


@dataclass
class ManifestRecord:
    image_path: str
    mask_path: str = ""
    label: Optional[int] = None
    source_id: str = ""
    split: str = ""
    regions: dict = field(default_factory=dict)


def write_manifest(path, records: Sequence[ManifestRecord]):
    with_regions = any(r.regions for r in records)
    fields = MANIFEST_FIELDS + (REGION_FIELDS if with_regions else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in records:
            row = [r.image_path, r.mask_path, "" if r.label is None else r.label, r.source_id, r.split]
            if with_regions:
                row += [r.regions.get(f.split("_")[0], "") for f in REGION_FIELDS]
            w.writerow(row)


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_path", "source_id"} - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"manifest {path} lacks columns {sorted(missing)}")
        out = []
        for row in reader:
            label = row.get("label") or ""
            regions = {f.split("_")[0]: row[f] for f in REGION_FIELDS if row.get(f)}
            out.append(ManifestRecord(row["image_path"], row.get("mask_path") or "",
                                      int(label) if label.strip() else None,
                                      row["source_id"], row.get("split") or "", regions))
    return out


def resolve(base: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_record(record: ManifestRecord, base: Path) -> Sample:
    path = resolve(base, record.image_path)
    if not path.exists():
        raise DataError(f"image not found: {path} (source_id {record.source_id!r})")
    image = load_image_png(path)
    if record.mask_path:
        mask = load_mask_png(resolve(base, record.mask_path))
    else:
        mask = np.zeros(image.shape[:2], np.float32)
    return Sample(image, mask, record.label, record.source_id)


def load_manifest_samples(path) -> list[tuple[Sample, str]]:
    path = Path(path)
    return [(load_record(r, path.parent), r.split) for r in read_manifest(path)]


# ----------------------------------------------------------------------- batching

def to_batch(samples: Sequence[Sample]):
    """Stack samples into torch tensors: images (N,C,H,W), masks (N,1,H,W), labels (N,)."""
    import torch

    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2)
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))[:, None]
    labels = torch.tensor([-1 if s.label is None else s.label for s in samples], dtype=torch.long)
    return images.contiguous(), masks, labels


def iter_batches(samples: Sequence[Sample], batch_size: int, rng: Optional[np.random.Generator] = None):
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]

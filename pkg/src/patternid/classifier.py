"""Linear softmax head on a flattened encoder, shallow or deep fine-tuning, metrics."""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetSplits, Sample, iter_batches, to_batch, validate_image
from .encoder import Encoder, build_encoder
from .errors import ConfigError, DataError, TrainingError
from .inpainting.models import ArchitectureConfig, load_state_arrays, read_container, state_arrays, write_container

log = logging.getLogger(__name__)

MODES = ("shallow", "deep")
DEFAULT_LR = {"shallow": 1e-3, "deep": 1e-4}
METRIC_FIELDS = ["epoch", "split", "accuracy", "recall", "f1", "cross_entropy"]


class ClassifierModel(nn.Module):
    def __init__(self, encoder: Encoder, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.embedding_dim, n_classes)
        self.n_classes = n_classes
        self.mode: Optional[str] = None

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Logits for NCHW images."""
        return self.head(self.encoder.embed_tensor(images))


def attach_head(encoder: Encoder, n_classes: int, seed: int = 0, init: str = "uniform") -> ClassifierModel:
    """Wrap a copy of ``encoder`` with a K-way linear head.

    Weights are U(-1/sqrt(D), 1/sqrt(D)) from ``seed`` (or zeros with
    ``init="zeros"``); the bias starts at zero.
    """
    if n_classes < 2:
        raise ConfigError(f"a classifier needs at least 2 classes, got {n_classes}")
    clf = ClassifierModel(copy.deepcopy(encoder), int(n_classes))
    with torch.no_grad():
        if init == "zeros":
            clf.head.weight.zero_()
        elif init == "uniform":
            bound = 1.0 / math.sqrt(clf.head.in_features)
            g = torch.Generator().manual_seed(int(seed))
            clf.head.weight.copy_(torch.rand(clf.head.weight.shape, generator=g) * 2 * bound - bound)
        else:
            raise ConfigError(f"unknown head init {init!r}; valid: uniform, zeros")
        clf.head.bias.zero_()
    return clf


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _probs(clf: ClassifierModel, samples, batch_size=64) -> np.ndarray:
    was = clf.training
    clf.eval()
    out = []
    try:
        with torch.no_grad():
            for batch in iter_batches(samples, batch_size):
                images, _, _ = to_batch(batch)
                out.append(softmax(clf(images).double().numpy()))
    finally:
        clf.train(was)
    return np.concatenate(out)


def predict(clf: ClassifierModel, image: np.ndarray) -> np.ndarray:
    image = validate_image(image)
    expected = (*clf.encoder.input_size, clf.encoder.image_channels)
    if image.shape != expected:
        raise DataError(f"image size mismatch: expected {expected}, got {image.shape}")
    return _probs(clf, [Sample(image, np.zeros(image.shape[:2], np.float32))])[0]


def encoder_checksum(encoder: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(encoder.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ metrics

@dataclass
class ClassificationMetrics:
    accuracy: float
    macro_recall: float
    macro_f1: float
    cross_entropy: float
    n: int
    per_class: dict = field(default_factory=dict)  # class -> {support, predicted, correct, recall, precision, f1}

    def row(self):
        return [self.accuracy, self.macro_recall, self.macro_f1, self.cross_entropy]


def classification_metrics(y_true, y_pred, probs=None) -> ClassificationMetrics:
    """Accuracy plus recall/F1 macro-averaged over classes seen in either labels or predictions."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.size == 0:
        raise DataError("cannot evaluate an empty sample set")
    per_class = {}
    for c in np.union1d(y_true, y_pred):
        support = int((y_true == c).sum())
        predicted = int((y_pred == c).sum())
        correct = int(((y_true == c) & (y_pred == c)).sum())
        recall = correct / support if support else 0.0
        precision = correct / predicted if predicted else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[int(c)] = dict(support=support, predicted=predicted, correct=correct,
                                 recall=recall, precision=precision, f1=f1)
    ce = float("nan")
    if probs is not None:
        p = np.asarray(probs, dtype=np.float64)[np.arange(len(y_true)), y_true]
        ce = float(-np.mean(np.log(np.clip(p, 1e-300, None))))
    return ClassificationMetrics(
        accuracy=float((y_true == y_pred).mean()),
        macro_recall=float(np.mean([v["recall"] for v in per_class.values()])),
        macro_f1=float(np.mean([v["f1"] for v in per_class.values()])),
        cross_entropy=ce, n=int(y_true.size), per_class=per_class,
    )


def _labels(clf: ClassifierModel, samples) -> np.ndarray:
    y = []
    for s in samples:
        if s.label is None:
            raise DataError(f"sample {s.source_id!r} has no label")
        if not 0 <= s.label < clf.n_classes:
            raise DataError(f"label {s.label} of {s.source_id!r} outside [0, {clf.n_classes})")
        y.append(s.label)
    return np.array(y, dtype=int)


def evaluate(clf: ClassifierModel, samples: Sequence[Sample], batch_size: int = 64) -> ClassificationMetrics:
    if not samples:
        raise DataError("cannot evaluate an empty sample set")
    y = _labels(clf, samples)
    probs = _probs(clf, samples, batch_size)
    return classification_metrics(y, probs.argmax(1), probs)


# ------------------------------------------------------------------ training

@dataclass
class ClassifierSchedule:
    epochs: int = 15
    batch_size: int = 8
    lr: Optional[float] = None  # None: per-mode default
    betas: tuple = (0.5, 0.999)


@dataclass
class EpochRecord:
    epoch: int
    split: str
    metrics: ClassificationMetrics
    train_loss: float = float("nan")


@dataclass
class ClassifierHistory:
    mode: str
    records: list = field(default_factory=list)
    best_epoch: int = 0
    test: Optional[ClassificationMetrics] = None
    checksum_before: str = ""
    checksum_after: str = ""

    def curve(self, metric="accuracy", split="val"):
        return [getattr(r.metrics, metric) for r in self.records if r.split == split]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_FIELDS)
            for r in self.records:
                w.writerow([r.epoch, r.split, *(repr(float(v)) for v in r.metrics.row())])
            if self.test is not None:
                w.writerow(["best", "test", *(repr(float(v)) for v in self.test.row())])


def train_classifier(clf: ClassifierModel, splits: DatasetSplits, mode: str,
                     schedule: Optional[ClassifierSchedule] = None, seed: int = 0,
                     on_epoch: Optional[Callable[[int, ClassifierModel], None]] = None,
                     track_test: bool = False) -> ClassifierHistory:
    """Fine-tune ``clf`` in ``shallow`` (head only) or ``deep`` (everything) mode.

    Validation metrics are recorded each epoch; the epoch with the best
    validation accuracy (earliest on ties) is restored and scored on test.
    ``on_epoch(epoch, clf)`` runs before training (epoch 0) and after each epoch.
    With ``track_test`` the test split is also scored every epoch (for curves
    only; selection never looks at it).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; valid: {', '.join(MODES)}")
    schedule = schedule or ClassifierSchedule()
    if not splits.train:
        raise DataError("classifier training needs a non-empty train split")
    y_train = _labels(clf, splits.train)
    for part in (splits.val, splits.test):
        _labels(clf, part)
    lr = schedule.lr if schedule.lr is not None else DEFAULT_LR[mode]
    clf.mode = mode
    torch.manual_seed(seed)
    if mode == "shallow":
        clf.encoder.requires_grad_(False)
        params = list(clf.head.parameters())
    else:
        clf.encoder.requires_grad_(True)
        params = list(clf.parameters())
    opt = torch.optim.Adam(params, lr=lr, betas=tuple(schedule.betas))
    hist = ClassifierHistory(mode, checksum_before=encoder_checksum(clf.encoder))
    best_acc, best_state = -1.0, None
    label_of = {id(s): int(y) for s, y in zip(splits.train, y_train)}

    def set_train():
        clf.train()
        if mode == "shallow":
            clf.encoder.eval()  # frozen: BN running stats must not move either

    if on_epoch:
        on_epoch(0, clf)
    for epoch in range(1, schedule.epochs + 1):
        set_train()
        rng = np.random.default_rng([seed, epoch])
        losses, sizes = [], []
        for batch in iter_batches(splits.train, schedule.batch_size, rng):
            images, _, _ = to_batch(batch)
            target = torch.tensor([label_of[id(s)] for s in batch])
            loss = F.cross_entropy(clf(images), target)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite classification loss in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            sizes.append(len(batch))
        train_loss = float(np.average(losses, weights=sizes))
        if splits.val:
            val = evaluate(clf, splits.val)
            hist.records.append(EpochRecord(epoch, "val", val, train_loss))
            acc = val.accuracy
            log.info("%s %s epoch %d: loss %.4f val acc %.3f", clf.encoder.arch, mode, epoch, train_loss, acc)
        else:
            acc = -train_loss
        if track_test and splits.test:
            hist.records.append(EpochRecord(epoch, "test", evaluate(clf, splits.test), train_loss))
        if acc > best_acc:
            best_acc, best_state, hist.best_epoch = acc, copy.deepcopy(clf.state_dict()), epoch
        if on_epoch:
            on_epoch(epoch, clf)
    if best_state is not None:
        clf.load_state_dict(best_state)
    clf.eval()
    if splits.test:
        hist.test = evaluate(clf, splits.test)
    hist.checksum_after = encoder_checksum(clf.encoder)
    if mode == "shallow" and hist.checksum_after != hist.checksum_before:
        raise TrainingError("encoder parameters changed during shallow training")
    return hist


# ------------------------------------------------------------------ checkpoints

def save_classifier(path, clf: ClassifierModel, extra: Optional[dict] = None):
    enc = clf.encoder
    meta = {"kind": "classifier", "arch": enc.arch, "mode": clf.mode, "n_classes": clf.n_classes,
            "input_size": list(enc.input_size), "image_channels": enc.image_channels,
            "config": enc.config.to_dict() if enc.config is not None else None, **(extra or {})}
    write_container(path, meta, {**state_arrays(enc.net, "encoder"), **state_arrays(clf.head, "head")})


def load_classifier(path) -> tuple[ClassifierModel, dict]:
    meta, arrays = read_container(path)
    if meta.get("kind") != "classifier":
        raise DataError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected 'classifier'")
    cfg = ArchitectureConfig.from_dict(meta["config"]) if meta.get("config") else None
    enc = build_encoder(meta["arch"], cfg, tuple(meta["input_size"]), image_channels=meta["image_channels"])
    load_state_arrays(enc.net, arrays, "encoder")
    clf = ClassifierModel(enc, meta["n_classes"])
    load_state_arrays(clf.head, arrays, "head")
    clf.mode = meta.get("mode")
    clf.eval()
    return clf, meta

"""Encoder isolation and per-image embeddings ``E = g(I (+) 0)``."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import Sample, iter_batches, to_batch, validate_image
from .errors import ConfigError, DataError
from .inpainting.models import ArchitectureConfig, InpaintingModel, build_model, init_weights


class Encoder(nn.Module):
    """Front half of a generator, fed ``image (+) mask-channel`` and returning its feature map."""

    def __init__(self, arch: str, net: nn.Module, input_size=(64, 64), image_channels: int = 3,
                 config: Optional[ArchitectureConfig] = None):
        super().__init__()
        self.arch = arch
        self.net = net
        self.config = config
        self.input_size = tuple(input_size)
        self.image_channels = image_channels
        was = net.training
        net.eval()
        with torch.no_grad():
            out = net(torch.zeros(1, image_channels + 1, *self.input_size))
        net.train(was)
        self.output_shape = (out.shape[2], out.shape[3], out.shape[1])  # (H', W', C')

    @property
    def embedding_dim(self) -> int:
        h, w, c = self.output_shape
        return h * w * c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def embed_tensor(self, images: torch.Tensor) -> torch.Tensor:
        """Flattened (N, H'*W'*C') features of NCHW images with an all-zero mask channel."""
        zeros = images.new_zeros(images.shape[0], 1, *images.shape[2:])
        return flatten(self.net(torch.cat([images, zeros], 1)))


def flatten(feat: torch.Tensor) -> torch.Tensor:
    """(N, C, H, W) -> (N, H*W*C), row-major over (H, W, C)."""
    return feat.permute(0, 2, 3, 1).reshape(feat.shape[0], -1)


def unflatten(vec: np.ndarray, output_shape) -> np.ndarray:
    return np.asarray(vec).reshape(tuple(output_shape))


def isolate_encoder(model: InpaintingModel, input_size=(64, 64)) -> Encoder:
    boundary = getattr(model, "boundary", None)
    net = getattr(model.generator, boundary, None) if boundary else None
    if net is None:
        raise ConfigError(f"model {type(model).__name__} has no tagged encoder boundary")
    return Encoder(model.arch, copy.deepcopy(net), input_size, model.config.image_channels, model.config)


class BaselineEncoderNet(nn.Sequential):
    """Generic three-stage CNN trained from scratch; stands in for the ImageNet baselines."""

    def __init__(self, in_channels=4, base=16):
        layers = []
        c = in_channels
        for w in (base, 2 * base, 4 * base):
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(True), nn.MaxPool2d(2)]
            c = w
        super().__init__(*layers)


def build_encoder(arch: str, config: Optional[ArchitectureConfig] = None, input_size=(64, 64), seed: int = 0,
                  image_channels: int = 3) -> Encoder:
    """Fresh (randomly initialised) encoder for ``arch`` or the ``baseline`` CNN."""
    if arch == "baseline":
        base = config.base_channels if config is not None else 16
        net = BaselineEncoderNet(image_channels + 1, base)
        init_weights(net, seed)
        return Encoder("baseline", net, input_size, image_channels, None)
    return isolate_encoder(build_model(arch, config, seed), input_size)


@dataclass
class Embedding:
    vector: np.ndarray
    label: Optional[int] = None
    source_id: str = ""


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray            # (N, D)
    labels: list
    source_ids: list

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise DataError(f"embedding matrix must be (N>=1, D), got {self.rows.shape}")
        if len(self.labels) != len(self.rows) or len(self.source_ids) != len(self.rows):
            raise DataError("labels/source_ids are not aligned with the embedding rows")

    def __len__(self):
        return len(self.rows)

    @property
    def label_array(self) -> np.ndarray:
        return np.array([-1 if l is None else l for l in self.labels])

    def to_csv(self, path):
        d = self.rows.shape[1]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join([f"f{i}" for i in range(d)] + ["label", "source_id"]) + "\n")
            for row, label, sid in zip(self.rows, self.labels, self.source_ids):
                vals = ",".join("%.9g" % v for v in row)
                fh.write(f"{vals},{'' if label is None else label},{sid}\n")

    @classmethod
    def from_csv(cls, path) -> "EmbeddingMatrix":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            d = len(header) - 2
            rows, labels, sids = [], [], []
            for line in fh:
                parts = line.rstrip("\n").split(",")
                rows.append([float(v) for v in parts[:d]])
                labels.append(int(parts[d]) if parts[d] else None)
                sids.append(",".join(parts[d + 1:]))
        return cls(np.array(rows, dtype=np.float32), labels, sids)


def _check_size(encoder: Encoder, image: np.ndarray):
    expected = (*encoder.input_size, encoder.image_channels)
    if tuple(image.shape) != expected:
        raise DataError(f"image size mismatch: encoder expects {expected}, got {tuple(image.shape)}")


def embed(encoder: Encoder, image: np.ndarray, label=None, source_id: str = "") -> Embedding:
    image = validate_image(image)
    _check_size(encoder, image)
    x = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)[None]
    was = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            vec = encoder.embed_tensor(x)[0].numpy()
    finally:
        encoder.train(was)
    return Embedding(vec, label, source_id)


def embed_dataset(encoder: Encoder, samples: Sequence[Sample], batch_size: int = 32) -> EmbeddingMatrix:
    """Embed every sample. Images are stacked ``batch_size`` at a time but forwarded
    one by one: conv kernels pick batch-size dependent algorithms, and rows must
    match :func:`embed` bit for bit."""
    if not samples:
        raise DataError("cannot embed an empty sample list")
    was = encoder.training
    encoder.eval()
    rows = []
    try:
        with torch.no_grad():
            for batch in iter_batches(samples, batch_size):
                for s in batch:
                    try:
                        _check_size(encoder, s.image)
                    except DataError as exc:
                        raise DataError(f"embedding failed for {s.source_id!r}: {exc}") from exc
                images, _, _ = to_batch(batch)
                rows.extend(encoder.embed_tensor(images[i:i + 1]).numpy() for i in range(len(batch)))
    finally:
        encoder.train(was)
    return EmbeddingMatrix(np.concatenate(rows), [s.label for s in samples], [s.source_id for s in samples])

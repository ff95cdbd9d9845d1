"""Composite generator loss and hinge discriminator loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import TrainingError
from .models import LOSS_COMPONENTS


class LossNaNError(TrainingError):
    def __init__(self, component: str):
        self.component = component
        super().__init__(f"non-finite {component} loss; aborting training")


@dataclass
class LossBreakdown:
    l1: float = 0.0
    adversarial: float = 0.0
    perceptual: float = 0.0
    feature_matching: float = 0.0
    style: float = 0.0
    edge: float = 0.0
    total: float = 0.0
    tensor: Optional[torch.Tensor] = field(default=None, compare=False, repr=False)

    @classmethod
    def combine(cls, components: dict, weights: dict) -> "LossBreakdown":
        """Weighted sum of whichever components are present; absent ones count as zero."""
        total = None
        values = {}
        for name in LOSS_COMPONENTS:
            c = components.get(name)
            if c is None:
                continue
            v = float(c.detach()) if torch.is_tensor(c) else float(c)
            if not math.isfinite(v):
                raise LossNaNError(name)
            values[name] = v
            w = weights.get(name, 0.0)
            if w:
                total = w * c if total is None else total + w * c
        if total is None:
            total = 0.0
        t = float(total.detach()) if torch.is_tensor(total) else float(total)
        if not math.isfinite(t):
            raise LossNaNError("total")
        return cls(**values, total=t, tensor=total if torch.is_tensor(total) else None)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "tensor"}

    @staticmethod
    def mean(items, sizes=None) -> "LossBreakdown":
        items = list(items)
        sizes = sizes or [1] * len(items)
        n = float(sum(sizes))
        out = {}
        for name in LOSS_COMPONENTS + ("total",):
            out[name] = sum(getattr(b, name) * s for b, s in zip(items, sizes)) / n
        return LossBreakdown(**out)


class FeatureNet(nn.Module):
    """Small frozen, randomly initialised conv net used for perceptual and style terms.

    Stands in for a pretrained VGG; pass any module returning a list of feature
    maps to :func:`generator_loss` to swap in a pretrained extractor.
    """

    def __init__(self, in_channels: int = 3, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_channels, 16, 3, padding=1), nn.ReLU(), nn.Conv2d(16, 16, 3, padding=1), nn.ReLU()),
            nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(16, 32, 3, padding=1), nn.ReLU()),
            nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(32, 32, 3, padding=1), nn.ReLU()),
        ])
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                with torch.no_grad():
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=g)
                    m.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def gram(f: torch.Tensor) -> torch.Tensor:
    n, c, h, w = f.shape
    f = f.reshape(n, c, h * w)
    return f @ f.transpose(1, 2) / (c * h * w)


def perceptual_and_style(pred, target, feature_net):
    fp, ft = feature_net(pred), feature_net(target)
    perceptual = sum(F.l1_loss(a, b) for a, b in zip(fp, ft))
    style = sum(F.l1_loss(gram(a), gram(b)) for a, b in zip(fp, ft))
    return perceptual, style


def generator_loss(pred, target, mask, disc_fake_scores, weights: dict, *, feature_net=None,
                   disc_real_features=None, disc_fake_features=None,
                   edge_pred=None, edge_target=None) -> LossBreakdown:
    """Weighted generator objective.

    ``pred`` is the composited output. The adversarial term is the hinge
    generator loss ``-mean(D(pred))``. Perceptual/style terms need a
    ``feature_net``; feature matching needs discriminator features of the real
    and the generated image; the edge term needs predicted and target edges.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    comps = {"l1": (pred - target).abs().mean()}
    if disc_fake_scores is not None:
        comps["adversarial"] = -disc_fake_scores.mean()
    if feature_net is not None and (weights.get("perceptual") or weights.get("style")):
        comps["perceptual"], comps["style"] = perceptual_and_style(pred, target, feature_net)
    if weights.get("feature_matching") and disc_real_features is not None:
        comps["feature_matching"] = sum(
            F.l1_loss(f, r.detach()) for f, r in zip(disc_fake_features, disc_real_features)
        ) / len(disc_fake_features)
    if weights.get("edge") and edge_pred is not None:
        eps = 1e-6
        comps["edge"] = F.binary_cross_entropy(edge_pred.clamp(eps, 1 - eps), edge_target)
    return LossBreakdown.combine(comps, weights)


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return F.relu(1 - real_scores).mean() + F.relu(1 + fake_scores).mean()

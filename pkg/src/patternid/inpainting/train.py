"""Adversarial inpainting training with best-validation checkpoint selection."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..data import DatasetSplits, iter_batches, to_batch
from ..errors import DataError, TrainingError
from .losses import FeatureNet, LossBreakdown, LossNaNError, discriminator_loss, generator_loss
from .models import LOSS_COMPONENTS, InpaintingModel, composite, model_input, save_checkpoint
from .nets import EdgeConnectGenerator, canny_edges, rgb_to_gray

log = logging.getLogger(__name__)

LOG_FIELDS = ["iteration", "epoch", "split", *LOSS_COMPONENTS, "total"]


@dataclass
class InpaintSchedule:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    val_every: int = 0  # iterations; 0 = once per epoch


@dataclass
class LogRecord:
    iteration: int
    epoch: int
    split: str
    losses: LossBreakdown


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    best_checkpoint: Optional[tuple] = None  # (iteration, val_total_loss)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def epoch_means(self, component="l1", split="train"):
        by_epoch = {}
        for r in self.split(split):
            by_epoch.setdefault(r.epoch, []).append(getattr(r.losses, component))
        return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}

    def rows(self):
        for r in self.records:
            d = r.losses.as_dict()
            yield [r.iteration, r.epoch, r.split] + [repr(float(d[k])) for k in (*LOSS_COMPONENTS, "total")]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            w.writerows(self.rows())

    def __eq__(self, other):
        return (isinstance(other, TrainingLog) and list(self.rows()) == list(other.rows())
                and self.best_checkpoint == other.best_checkpoint)


class _Step:
    """One generator evaluation: composite output and its loss."""

    def __init__(self, model: InpaintingModel, feature_net: FeatureNet):
        self.model = model
        self.feature_net = feature_net
        self.weights = model.config.loss_weights
        self.edgeconnect = isinstance(model.generator, EdgeConnectGenerator)

    def __call__(self, images, masks):
        x = model_input(images, masks)
        g = self.model.generator
        edge_pred = edge_target = None
        if self.edgeconnect:
            raw, _, edge_pred = g.complete(x)
            if g.edge_stage:
                edge_target = canny_edges(rgb_to_gray(images))
            else:
                edge_pred = None
        else:
            raw = g(x)
        comp = composite(raw, images, masks)
        d = self.model.discriminator
        fm = bool(self.weights.get("feature_matching"))
        if fm:
            fake_scores, fake_feats = d(comp, return_features=True)
            with torch.no_grad():
                _, real_feats = d(images, return_features=True)
        else:
            fake_scores, fake_feats, real_feats = d(comp), None, None
        loss = generator_loss(comp, images, masks, fake_scores, self.weights, feature_net=self.feature_net,
                              disc_real_features=real_feats, disc_fake_features=fake_feats,
                              edge_pred=edge_pred, edge_target=edge_target)
        return comp, loss


def evaluate_generator(model: InpaintingModel, samples, batch_size: int = 8,
                       feature_net: Optional[FeatureNet] = None) -> LossBreakdown:
    """Mean generator loss over ``samples`` with the model in eval mode."""
    feature_net = feature_net or FeatureNet(model.config.image_channels)
    step = _Step(model, feature_net)
    was_training = model.training
    model.eval()
    parts, sizes = [], []
    try:
        with torch.no_grad():
            for batch in iter_batches(samples, batch_size):
                images, masks, _ = to_batch(batch)
                parts.append(step(images, masks)[1])
                sizes.append(len(batch))
    finally:
        model.train(was_training)
    return LossBreakdown.mean(parts, sizes)


def train_inpainting(model: InpaintingModel, splits: DatasetSplits, schedule: InpaintSchedule = None,
                     seed: int = 0, checkpoint_dir=None, progress=None) -> TrainingLog:
    """Alternate generator and discriminator updates; keep the lowest-validation-loss weights.

    On return the model holds the best checkpoint's weights. With a
    ``checkpoint_dir``, ``best.npz`` and ``last.npz`` are written at every
    validation; a diverging run raises :class:`TrainingError` and leaves the
    last good checkpoint on disk.
    """
    schedule = schedule or InpaintSchedule()
    if not splits.train or not splits.val:
        raise DataError("inpainting training needs non-empty train and val splits")
    torch.manual_seed(seed)
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    feature_net = FeatureNet(model.config.image_channels)
    step = _Step(model, feature_net)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=schedule.lr, betas=tuple(schedule.betas))
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=schedule.lr, betas=tuple(schedule.betas))
    per_epoch = -(-len(splits.train) // schedule.batch_size)
    val_every = schedule.val_every or per_epoch
    log_ = TrainingLog()
    best_state, best = None, (None, float("inf"))
    it = 0
    model.train()
    for epoch in range(1, schedule.epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        for batch in iter_batches(splits.train, schedule.batch_size, rng):
            images, masks, _ = to_batch(batch)
            it += 1
            try:
                comp, loss = step(images, masks)
            except LossNaNError as exc:
                raise TrainingError(f"{exc} at iteration {it}; last good checkpoint kept in {ckpt}") from exc
            opt_g.zero_grad(set_to_none=True)
            if loss.tensor is not None:
                loss.tensor.backward()
            opt_g.step()

            d = model.discriminator
            d_loss = discriminator_loss(d(images), d(comp.detach()))
            if not torch.isfinite(d_loss):
                raise TrainingError(f"non-finite discriminator loss at iteration {it}")
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            log_.records.append(LogRecord(it, epoch, "train", LossBreakdown(**loss.as_dict())))

            if it % val_every == 0:
                val = evaluate_generator(model, splits.val, schedule.batch_size, feature_net)
                log_.records.append(LogRecord(it, epoch, "val", val))
                if val.total < best[1]:
                    best = (it, val.total)
                    best_state = copy.deepcopy(model.state_dict())
                    if ckpt:
                        save_checkpoint(ckpt / "best.npz", model, it, val.total)
                if ckpt:
                    save_checkpoint(ckpt / "last.npz", model, it, val.total)
                log.info("%s it %d epoch %d: train l1 %.4f, val total %.4f", model.arch, it, epoch,
                         loss.l1, val.total)
                if progress:
                    progress(it, epoch, val)
    if best_state is None:
        # fewer iterations than val_every: validate once at the end
        val = evaluate_generator(model, splits.val, schedule.batch_size, feature_net)
        log_.records.append(LogRecord(it, schedule.epochs, "val", val))
        best, best_state = (it, val.total), copy.deepcopy(model.state_dict())
        if ckpt:
            save_checkpoint(ckpt / "best.npz", model, it, val.total)
    model.load_state_dict(best_state)
    log_.best_checkpoint = best
    return log_

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import fd_check, rel_err
from patternid.data import build_inpainting_dataset
from patternid.errors import ConfigError, DataError, TrainingError
from patternid.inpainting.losses import LossBreakdown, LossNaNError, discriminator_loss, generator_loss
from patternid.inpainting.models import (
    ARCHS, ArchitectureConfig, build_model, composite, count_parameters, forward_inpaint, load_checkpoint,
    model_input, read_container, save_checkpoint,
)
from patternid.inpainting.nets import GatedConv
from patternid.inpainting.train import InpaintSchedule, train_inpainting
from patternid.synthetic import generate_dataset


@pytest.fixture(scope="module")
def models():
    return {a: build_model(a, seed=0) for a in ARCHS}


def test_param_counts_differ(models):
    counts = [count_parameters(m) for m in models.values()]
    assert len(set(counts)) == 4
    for m in models.values():
        assert count_parameters(m.generator.encoder) < count_parameters(m.generator)


def test_deepfill_encoder_has_five_gated_convs(models):
    enc = models["deepfillv2"].generator.encoder
    assert len(enc) == 5 and all(isinstance(b, GatedConv) for b in enc)


def test_unknown_arch():
    with pytest.raises(ConfigError, match="aotgan, deepfillv2, edgeconnect, lama"):
        build_model("pix2pix")
    with pytest.raises(ConfigError):
        ArchitectureConfig("lama", loss_weights={"bogus": 1.0})


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_shape_and_range(models, arch):
    m = models[arch].eval()
    with torch.no_grad():
        out = m(torch.rand(2, 4, 64, 64))
    assert out.shape == (2, 3, 64, 64)
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_inpaint_composite(models, arch, rng):
    img = rng.random((32, 32, 3)).astype(np.float32)
    mask = (rng.random((32, 32)) < 0.4).astype(np.float32)
    out = forward_inpaint(models[arch], img, mask)
    keep = mask == 0
    assert np.array_equal(out[keep], img[keep])
    assert np.array_equal(forward_inpaint(models[arch], img, np.zeros((32, 32))), img)
    full = forward_inpaint(models[arch], img, np.ones((32, 32)))
    with torch.no_grad():
        raw = models[arch].eval().generator(torch.from_numpy(np.concatenate(
            [np.zeros_like(img), np.ones((32, 32, 1), np.float32)], 2)).permute(2, 0, 1)[None])
    assert np.array_equal(full, raw[0].permute(1, 2, 0).numpy())
    with pytest.raises(DataError):
        forward_inpaint(models[arch], img, np.zeros((31, 32)))


def test_loss_examples():
    x = torch.rand(1, 3, 4, 4)
    m = torch.ones(1, 1, 4, 4)
    assert generator_loss(x, x, m, None, {"l1": 1.0}).l1 == 0
    assert generator_loss(x + 0.1, x, m, None, {"l1": 1.0}).l1 == pytest.approx(0.1, abs=1e-6)
    b = LossBreakdown.combine({"l1": torch.tensor(0.2), "adversarial": torch.tensor(-0.5)},
                              {"l1": 1.0, "adversarial": 0.01})
    assert b.total == pytest.approx(0.195, abs=1e-7)


def test_adversarial_is_negative_mean_score():
    x = torch.rand(1, 3, 4, 4)
    scores = torch.tensor([0.5, -1.5, 2.0])
    b = generator_loss(x, x, torch.ones(1, 1, 4, 4), scores, {"l1": 1.0, "adversarial": 1.0})
    assert b.adversarial == pytest.approx(-1.0 / 3)


def test_feature_matching_only_when_weighted():
    x = torch.rand(1, 3, 8, 8)
    feats = [torch.rand(1, 2, 2, 2)]
    b = generator_loss(x, x, torch.ones(1, 1, 8, 8), None, {"l1": 1.0}, disc_real_features=feats,
                       disc_fake_features=[f + 1 for f in feats])
    assert b.feature_matching == 0
    b = generator_loss(x, x, torch.ones(1, 1, 8, 8), None, {"l1": 1.0, "feature_matching": 1.0},
                       disc_real_features=feats, disc_fake_features=[f + 1 for f in feats])
    assert b.feature_matching == pytest.approx(1.0)


def test_nan_component_is_named():
    with pytest.raises(LossNaNError, match="adversarial") as info:
        LossBreakdown.combine({"l1": torch.tensor(0.1), "adversarial": torch.tensor(float("nan"))}, {"l1": 1.0})
    assert info.value.component == "adversarial"
    assert isinstance(info.value, TrainingError)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.lists(st.floats(-50, 50), min_size=1, max_size=20))
@settings(max_examples=50, deadline=None)
def test_hinge_discriminator_loss_nonnegative(real, fake):
    assert float(discriminator_loss(torch.tensor(real), torch.tensor(fake))) >= 0


@pytest.mark.parametrize("arch", ARCHS)
def test_l1_gradient_matches_finite_differences(arch):
    m = build_model(arch, seed=0).double().eval()
    g = torch.Generator().manual_seed(1)
    img = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    mask = (torch.rand(1, 1, 8, 8, generator=g) < 0.5).double()

    def loss():
        out = composite(m.generator(model_input(img, mask)), img, mask)
        return generator_loss(out, img, mask, None, {"l1": 1.0}).tensor

    params = list(m.generator.parameters())
    for p in params[:: max(1, len(params) // 3)]:
        a, n = fd_check(loss, p, 4)
        assert rel_err(a, n).max() < 1e-3


def _splits(seed=0, n_ind=3, n_per=12):
    ds = generate_dataset(n_ind, n_per, seed)
    return build_inpainting_dataset(ds.inpainting, seed)


def test_training_is_deterministic_and_checkpoints(tmp_path):
    splits = _splits()
    sched = InpaintSchedule(epochs=1, batch_size=8, val_every=2)
    logs = []
    for run in ("a", "b"):
        model = build_model("aotgan", seed=0)
        logs.append(train_inpainting(model, splits, sched, seed=0, checkpoint_dir=tmp_path / run))
    assert logs[0] == logs[1]
    vals = [r for r in logs[0].records if r.split == "val"]
    assert len(vals) >= 2
    best_it, best_loss = logs[0].best_checkpoint
    assert best_loss == min(r.losses.total for r in vals)
    meta, arrays = read_container(tmp_path / "a" / "best.npz")
    assert meta["iteration"] == best_it and meta["val_loss"] == pytest.approx(best_loss)
    assert meta["kind"] == "inpainting" and meta["arch"] == "aotgan"
    assert any(k.startswith("generator.encoder.") for k in arrays)
    assert (tmp_path / "a" / "last.npz").exists()
    logs[0].to_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0].startswith("iteration,epoch,split,l1")


def test_checkpoint_round_trip(tmp_path, rng):
    m = build_model("lama", ArchitectureConfig("lama", base_channels=8), seed=3)
    save_checkpoint(tmp_path / "c.npz", m, 7, 0.5)
    back, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta["iteration"] == 7 and back.config == m.config
    img = rng.random((64, 64, 3)).astype(np.float32)
    mask = (rng.random((64, 64)) < 0.5).astype(np.float32)
    assert np.array_equal(forward_inpaint(m, img, mask), forward_inpaint(back, img, mask))
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.npz")


def test_training_aborts_on_nan(tmp_path):
    splits = _splits()
    model = build_model("lama", seed=0)
    with torch.no_grad():
        next(model.generator.decoder.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        train_inpainting(model, splits, InpaintSchedule(epochs=1), checkpoint_dir=tmp_path)


def test_training_needs_val():
    splits = _splits()
    with pytest.raises(DataError):
        train_inpainting(build_model("lama"), type(splits)(splits.train, (), (), 0))


@pytest.mark.slow
@pytest.mark.parametrize("arch", ARCHS)
def test_train_l1_decreases(arch):
    splits = _splits(0, 6, 16)
    log = train_inpainting(build_model(arch, seed=0), splits, InpaintSchedule(epochs=10), seed=0)
    l1 = log.epoch_means("l1")
    assert l1[10] < l1[1]
    assert all(math.isfinite(v) for v in l1.values())

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from matplotlib import colormaps

from patternid.classifier import attach_head, predict
from patternid.encoder import Encoder, build_encoder
from patternid.errors import ConfigError, DataError
from patternid.gradcam import (
    Heatmap, available_layers, colorize, epoch_hook, gradcam, normalize, overlay, overlay_path,
)


class LeftHalf(nn.Module):
    def forward(self, x):
        out = x.clone()
        out[..., x.shape[-1] // 2:] = 0
        return out


def toy_classifier(net, size=16, k=2, seed=0):
    return attach_head(Encoder("toy", net, (size, size)), k, seed=seed)


def left_half_net():
    conv = nn.Conv2d(4, 1, 1, bias=False)
    with torch.no_grad():
        conv.weight.fill_(1.0)
    return nn.Sequential(nn.Sequential(conv, LeftHalf(), nn.ReLU()))


def test_left_half_toy_concentrates_mass(rng):
    clf = toy_classifier(left_half_net(), 16, 2)
    with torch.no_grad():
        clf.head.weight.fill_(1.0)
    for _ in range(10):
        hm = gradcam(clf, rng.random((16, 16, 3)).astype(np.float32), target_class=0)
        assert hm.values[:, :8].sum() / hm.values.sum() > 0.9


def test_linear_toy_matches_hand_derivation(rng):
    torch.manual_seed(0)
    conv = nn.Conv2d(4, 3, 1)
    clf = toy_classifier(nn.Sequential(conv), 6, 3, seed=1)
    img = rng.random((6, 6, 3)).astype(np.float32)
    target = 2
    hm = gradcam(clf, img, target_class=target, layer_id="0")
    # logit_k = sum_{h,w,c} W[k, (h*W + w)*C + c] * A[c,h,w] + b_k, so dlogit/dA = reshaped W[k]
    w = clf.head.weight.detach().double().numpy()[target].reshape(6, 6, 3)
    x = np.concatenate([img, np.zeros((6, 6, 1), np.float32)], 2).astype(np.float64)
    act = np.einsum("hwi,ci->chw", x, conv.weight.detach().double().numpy()[:, :, 0, 0])
    act += conv.bias.detach().double().numpy()[:, None, None]
    alpha = w.mean((0, 1))
    cam = np.maximum((alpha[:, None, None] * act).sum(0), 0)
    expected, _ = normalize(cam)
    np.testing.assert_allclose(hm.values, expected, atol=1e-5)


@pytest.fixture(scope="module")
def lama_clf():
    return attach_head(build_encoder("lama", seed=0), 6, seed=0)


def test_invariants_on_random_inputs(lama_clf, rng):
    for i in range(50):
        img = rng.random((64, 64, 3)).astype(np.float32)
        hm = gradcam(lama_clf, img, target_class=i % 6, epoch=i)
        assert hm.values.shape == (64, 64)
        assert hm.values.min() >= 0 and hm.values.max() <= 1
        if not hm.all_zero:
            assert hm.values.min() == 0 or hm.values.max() == 1
        assert hm.epoch == i and hm.target_class == i % 6 and hm.colormap == "viridis"


def test_default_layer_and_class(lama_clf, rng):
    layers = available_layers(lama_clf)
    assert "0" not in layers  # padding is not a visualisable activation
    img = rng.random((64, 64, 3)).astype(np.float32)
    hm = gradcam(lama_clf, img)
    assert hm.layer_id == layers[-1]
    assert hm.target_class == int(predict(lama_clf, img).argmax())
    with pytest.raises(ConfigError, match=layers[-1]):
        gradcam(lama_clf, img, layer_id="nope")
    with pytest.raises(DataError):
        gradcam(lama_clf, img, target_class=6)


def test_frozen_encoder_still_yields_map(lama_clf, rng):
    lama_clf.encoder.requires_grad_(False)
    try:
        hm = gradcam(lama_clf, rng.random((64, 64, 3)).astype(np.float32), 0)
    finally:
        lama_clf.encoder.requires_grad_(True)
    assert hm.values.shape == (64, 64)


def test_all_zero_map_flagged():
    conv = nn.Conv2d(4, 1, 1)
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.fill_(-1.0)
    clf = toy_classifier(nn.Sequential(nn.Sequential(conv, nn.ReLU())), 8)
    hm = gradcam(clf, np.full((8, 8, 3), 0.5, np.float32), 0)
    assert hm.all_zero and not hm.values.any()


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-10, 10)))
@settings(max_examples=80, deadline=None)
def test_normalize_idempotent(cam):
    once, zero = normalize(cam)
    twice, _ = normalize(once)
    if not zero:
        np.testing.assert_allclose(twice, once, atol=1e-12)
        assert once.max() == 1
    assert once.min() >= 0 and once.max() <= 1


def test_overlay_two_by_two(rng):
    img = rng.random((2, 2, 3))
    values = np.array([[0.0, 0.25], [0.5, 1.0]])
    out = overlay(Heatmap(values, 0, 0, "x"), img, 0.5)
    cmap = colormaps["viridis"]
    for i in range(2):
        for j in range(2):
            np.testing.assert_allclose(out[i, j], 0.5 * img[i, j] + 0.5 * np.array(cmap(values[i, j])[:3]))
    assert np.array_equal(overlay(values, img, 0.0), img)
    flat = overlay(np.full((2, 2), 0.3), img, 1.0)
    assert np.allclose(flat, flat[0, 0]) and np.allclose(flat[0, 0], colorize(0.3))
    with pytest.raises(DataError):
        overlay(np.zeros((3, 3)), img)
    with pytest.raises(ConfigError):
        overlay(values, img, 1.5)


def test_epoch_hook_writes_overlays(tmp_path, rng):
    clf = toy_classifier(left_half_net(), 32, 2)
    images = [(rng.random((32, 32, 3)).astype(np.float32), c) for c in range(2)]
    hook = epoch_hook(images, tmp_path, "toy", "shallow")
    hook(3, clf)
    for c in range(2):
        p = overlay_path(tmp_path, "toy", "shallow", 3, c)
        assert p.exists() and p.name == f"e3_id{c}.png"
        assert p.parent == tmp_path / "gradcam" / "toy" / "shallow"

"""GradCAM heatmaps over encoder activations and colour-mapped overlays."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .classifier import ClassifierModel
from .data import validate_image
from .errors import ConfigError, DataError

COLORMAP = "viridis"
_SKIP = (nn.ReflectionPad2d, nn.ZeroPad2d, nn.ReplicationPad2d)


@dataclass
class Heatmap:
    values: np.ndarray   # (H, W) in [0, 1]
    target_class: int
    epoch: int
    layer_id: str
    all_zero: bool = False
    colormap: str = COLORMAP


def available_layers(clf: ClassifierModel) -> list:
    """Ids of the encoder's top-level blocks (padding layers excluded), shallow to deep."""
    return [name for name, m in clf.encoder.net.named_children() if not isinstance(m, _SKIP)]


def default_layer(clf: ClassifierModel) -> str:
    layers = available_layers(clf)
    if not layers:
        raise ConfigError("encoder has no layers to visualise")
    return layers[-1]


def normalize(cam: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1]. Returns (values, all_zero); a flat positive map becomes all ones."""
    cam = np.asarray(cam, dtype=np.float64)
    hi, lo = cam.max(), cam.min()
    if hi <= 0:
        return np.zeros_like(cam), True
    if hi == lo:
        return np.ones_like(cam), False
    return (cam - lo) / (hi - lo), False


def gradcam(clf: ClassifierModel, image: np.ndarray, target_class: Optional[int] = None,
            layer_id: Optional[str] = None, epoch: int = 0) -> Heatmap:
    """Gradient-weighted class activation map of ``target_class`` at ``layer_id``.

    Defaults: the deepest encoder block, and the predicted class.
    """
    image = validate_image(image)
    layers = available_layers(clf)
    layer_id = layer_id if layer_id is not None else default_layer(clf)
    if layer_id not in layers:
        raise ConfigError(f"unknown layer {layer_id!r}; valid layers: {', '.join(layers)}")
    module = dict(clf.encoder.net.named_children())[layer_id]
    store = {}

    def hook(_m, _inp, out):
        store["act"] = out
        out.register_hook(lambda g: store.__setitem__("grad", g))

    handle = module.register_forward_hook(hook)
    was = clf.training
    clf.eval()
    try:
        with torch.enable_grad():
            x = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)[None]
            x.requires_grad_(True)  # keeps a graph even when the encoder is frozen
            logits = clf(x)
            if target_class is None:
                target_class = int(logits[0].argmax())
            if not 0 <= target_class < clf.n_classes:
                raise DataError(f"target class {target_class} outside [0, {clf.n_classes})")
            logits[0, target_class].backward()
    finally:
        handle.remove()
        clf.train(was)
    act, grad = store["act"].detach()[0], store["grad"][0]
    weights = grad.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * act).sum(0))
    cam = F.interpolate(cam[None, None].double(), size=image.shape[:2], mode="bilinear", align_corners=False)[0, 0]
    values, zero = normalize(cam.numpy())
    return Heatmap(values, int(target_class), int(epoch), layer_id, zero)


def colorize(values: np.ndarray, colormap: str = COLORMAP) -> np.ndarray:
    from matplotlib import colormaps
    return np.asarray(colormaps[colormap](np.asarray(values)))[..., :3]


def overlay(heatmap, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """``(1 - alpha) * image + alpha * colormap(heatmap)``."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    cmap = heatmap.colormap if isinstance(heatmap, Heatmap) else COLORMAP
    image = np.asarray(image)
    if values.shape != image.shape[:2]:
        raise DataError(f"heatmap {values.shape} does not match image {image.shape[:2]}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0:
        return image.copy()
    return (1 - alpha) * image + alpha * colorize(values, cmap)


def overlay_path(root, arch: str, mode: str, epoch: int, cls: int) -> Path:
    return Path(root) / "gradcam" / arch / mode / f"e{epoch}_id{cls}.png"


def save_overlay(path, heatmap: Heatmap, image: np.ndarray, alpha: float = 0.5):
    from PIL import Image
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.round(overlay(heatmap, image, alpha) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(path)


def epoch_hook(examples, root, arch: str, mode: str, layer_id=None, alpha: float = 0.5):
    """``on_epoch`` callback writing one overlay per (image, label) example each epoch."""
    def hook(epoch, clf):
        for image, label in examples:
            hm = gradcam(clf, image, label, layer_id, epoch)
            save_overlay(overlay_path(root, arch, mode, epoch, hm.target_class), hm, image, alpha)
    return hook

"""Architecture configs, model construction, Eq.-style inpainting forward and checkpoint io."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ..data import apply_mask, validate_image, validate_mask
from ..errors import ConfigError, DataError
from .nets import ENCODER_BOUNDARY, GENERATORS, PatchDiscriminator

ARCHS = tuple(GENERATORS)
LOSS_COMPONENTS = ("l1", "adversarial", "perceptual", "feature_matching", "style", "edge")

# Desk-scale encoder widths as multiples of base_channels. The four families keep
# their block types; widths are picked so the flattened encoder outputs differ.
WIDTH_MULTIPLIERS = {
    "aotgan": (1, 2, 4),
    "deepfillv2": (0.5, 1, 1, 2, 2),
    "edgeconnect": (1, 2, 3),
    "lama": (1, 2, 4, 4),
}
DESK_BLOCKS = {"aotgan": (2,), "deepfillv2": (1,), "edgeconnect": (2,), "lama": (2,)}
FULL_BLOCKS = {"aotgan": (8,), "deepfillv2": (1,), "edgeconnect": (8,), "lama": (18,)}
DEFAULT_DILATIONS = {"aotgan": (1, 2, 4, 8), "deepfillv2": (2, 4, 8), "edgeconnect": (), "lama": ()}
DOWNSAMPLING = {"aotgan": 4, "deepfillv2": 4, "edgeconnect": 4, "lama": 8}
CHECKPOINT_FORMAT = "patternid-checkpoint"


def default_loss_weights(arch: str) -> dict:
    return {
        "l1": 1.0,
        "adversarial": 0.01,
        "perceptual": 0.1,
        "style": 120.0 if arch in ("aotgan", "lama") else 0.0,
        "feature_matching": 10.0 if arch == "edgeconnect" else 0.0,
        "edge": 1.0 if arch == "edgeconnect" else 0.0,
    }


@dataclass
class ArchitectureConfig:
    arch: str
    base_channels: int = 16
    block_counts: tuple = ()
    dilation_rates: tuple = ()
    edge_stage: bool = True
    spectral_branch: bool = True
    loss_weights: dict = field(default_factory=dict)
    image_channels: int = 3
    widths: tuple = ()

    def __post_init__(self):
        if self.arch not in GENERATORS:
            raise ConfigError(f"unknown arch {self.arch!r}; valid options: {', '.join(ARCHS)}")
        self.block_counts = tuple(self.block_counts) or DESK_BLOCKS[self.arch]
        self.dilation_rates = tuple(self.dilation_rates) or DEFAULT_DILATIONS[self.arch]
        if not self.widths:
            self.widths = tuple(max(int(round(m * self.base_channels)), 4) for m in WIDTH_MULTIPLIERS[self.arch])
        self.widths = tuple(int(w) for w in self.widths)
        weights = default_loss_weights(self.arch)
        unknown = set(self.loss_weights) - set(weights)
        if unknown:
            raise ConfigError(f"unknown loss weights {sorted(unknown)}; valid: {', '.join(LOSS_COMPONENTS)}")
        weights.update({k: float(v) for k, v in self.loss_weights.items()})
        if not all(np.isfinite(v) and v >= 0 for v in weights.values()):
            raise ConfigError(f"loss weights must be finite and non-negative: {weights}")
        if weights["l1"] <= 0:
            raise ConfigError("the l1 loss weight must be positive")
        self.loss_weights = weights

    @classmethod
    def full_size(cls, arch: str, **kw) -> "ArchitectureConfig":
        """Channel counts and block depths of the original published generators."""
        kw.setdefault("base_channels", 64)
        kw.setdefault("block_counts", FULL_BLOCKS.get(arch, (1,)))
        if arch == "deepfillv2":
            kw.setdefault("dilation_rates", (2, 4, 8, 16))
        return cls(arch, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_counts"] = list(self.block_counts)
        d["dilation_rates"] = list(self.dilation_rates)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        for key in ("block_counts", "dilation_rates", "widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def init_weights(module: nn.Module, seed: int):
    """Kaiming fan-in normal for convolutions and linear layers, zero biases."""
    g = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            weight = m.parametrizations.weight.original if hasattr(m, "parametrizations") else m.weight
            with torch.no_grad():
                nn.init.kaiming_normal_(weight, mode="fan_in", nonlinearity="relu", generator=g)
                if m.bias is not None:
                    m.bias.zero_()


class InpaintingModel(nn.Module):
    def __init__(self, config: ArchitectureConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.arch = config.arch
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.generator = GENERATORS[config.arch](config)
            self.discriminator = PatchDiscriminator(config.image_channels, config.base_channels)
        init_weights(self.generator, seed)
        init_weights(self.discriminator, seed + 1)

    @property
    def boundary(self) -> str:
        return ENCODER_BOUNDARY

    def forward(self, x):
        return self.generator(x)


def build_model(arch: str, config: ArchitectureConfig | None = None, seed: int = 0) -> InpaintingModel:
    if arch not in GENERATORS:
        raise ConfigError(f"unknown arch {arch!r}; valid options: {', '.join(ARCHS)}")
    if config is None:
        config = ArchitectureConfig(arch)
    elif config.arch != arch:
        raise ConfigError(f"config is for {config.arch!r}, not {arch!r}")
    return InpaintingModel(config, seed)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def model_input(images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """(masked image) (+) mask for batched NCHW tensors."""
    return torch.cat([images * (1 - masks), masks], 1)


def composite(raw: torch.Tensor, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    return torch.where(masks > 0.5, raw, images)


def forward_inpaint(model: InpaintingModel, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Inpaint one image: generator output inside the mask, original pixels elsewhere."""
    image = validate_image(image)
    mask = validate_mask(mask, image.shape)
    x = np.concatenate([apply_mask(image, mask), mask[..., None]], axis=2).astype(np.float32)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            raw = model.generator(torch.from_numpy(x).permute(2, 0, 1)[None])[0].permute(1, 2, 0).numpy()
    finally:
        model.train(was_training)
    out = np.where(mask[..., None] == 1, raw.astype(image.dtype), image)
    return out


# -------------------------------------------------------------------- checkpoints

def state_arrays(module: nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: dict, prefix: str):
    p = prefix + "."
    state = {k[len(p):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(p)}
    module.load_state_dict(state)


def write_container(path, meta: dict, arrays: dict):
    """npz container: one array per named tensor plus a JSON ``__meta__`` string."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": CHECKPOINT_FORMAT, "version": 1, **meta}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return meta, arrays


def save_checkpoint(path, model: InpaintingModel, iteration: int, val_loss: float):
    arrays = {**state_arrays(model.generator, "generator"), **state_arrays(model.discriminator, "discriminator")}
    meta = {"kind": "inpainting", "arch": model.arch, "config": model.config.to_dict(),
            "iteration": int(iteration), "val_loss": float(val_loss)}
    write_container(path, meta, arrays)


def load_checkpoint(path) -> tuple[InpaintingModel, dict]:
    meta, arrays = read_container(path)
    if meta.get("kind") != "inpainting":
        raise DataError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected 'inpainting'")
    model = build_model(meta["arch"], ArchitectureConfig.from_dict(meta["config"]))
    load_state_arrays(model.generator, arrays, "generator")
    load_state_arrays(model.discriminator, arrays, "discriminator")
    return model, meta


def import_pretrained(model: InpaintingModel, path):
    """Hook for loading third-party places2 generator weights (not implemented)."""
    raise NotImplementedError(
        "importing the original repositories' places2 checkpoints needs a per-arch key mapping; "
        "desk-scale models train from scratch"
    )

"""Procedural "individuals": elliptical bodies carrying a persistent stripe/spot pattern.

Each identity is a handful of oriented sinusoids plus Gaussian spots, thresholded
into stripes, on a faintly tinted body. Renders jitter pose, brightness and the
background texture; the pattern is the main stable cue between individuals.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .data import RegionMaskSet, Sample
from .errors import DataError

BODY_AXES = (0.40, 0.17)       # semi-axes as a fraction of the image size
PATTERN_SCALE = (0.80, 0.78)   # pattern region: inner ellipse of the body
FISH_INNER_SCALE = (0.70, 0.66)  # fish region: body minus this inner ellipse
STRIPE_COLOR = np.array([0.10, 0.12, 0.32])


@dataclass(frozen=True)
class PatternIdentity:
    identity_seed: int
    stripe_frequencies: tuple   # cycles across the body height
    stripe_orientations: tuple  # radians relative to the body's long axis
    phase_offsets: tuple        # in [0, 2*pi)
    spot_centers: tuple         # (u, v) body coordinates, inside the unit disc
    spot_radii: tuple
    base_color: tuple


@dataclass(frozen=True)
class RenderParams:
    pose_seed: int
    translation: tuple = (0.0, 0.0)
    rotation: float = 0.0
    brightness_jitter: float = 1.0
    background_texture_seed: int = 0

    def __post_init__(self):
        if not -15.0 <= self.rotation <= 15.0:
            raise DataError(f"rotation {self.rotation} outside [-15, 15] degrees")
        if not 0.8 <= self.brightness_jitter <= 1.2:
            raise DataError(f"brightness_jitter {self.brightness_jitter} outside [0.8, 1.2]")


def generate_identity(identity_seed: int) -> PatternIdentity:
    rng = np.random.default_rng([int(identity_seed), 7919])
    n_stripes = int(rng.integers(2, 4))
    n_spots = int(rng.integers(3, 6))
    radius = np.sqrt(rng.uniform(0.0, 0.55, n_spots))
    angle = rng.uniform(0, 2 * np.pi, n_spots)
    centers = tuple((float(r * np.cos(a)), float(r * np.sin(a))) for r, a in zip(radius, angle))
    base = np.array([0.80, 0.74, 0.52]) + rng.uniform(-0.03, 0.03, 3)
    return PatternIdentity(
        identity_seed=int(identity_seed),
        stripe_frequencies=tuple(float(f) for f in rng.uniform(1.2, 3.6, n_stripes)),
        stripe_orientations=tuple(float(o) for o in rng.uniform(-0.9, 0.9, n_stripes)),
        phase_offsets=tuple(float(p) for p in rng.uniform(0, 2 * np.pi, n_stripes)),
        spot_centers=centers,
        spot_radii=tuple(float(r) for r in rng.uniform(0.12, 0.28, n_spots)),
        base_color=tuple(float(c) for c in base),
    )


def random_render_params(pose_seed: int, size: int = 64) -> RenderParams:
    rng = np.random.default_rng([int(pose_seed), 104729])
    shift = 0.03 * size
    return RenderParams(
        pose_seed=int(pose_seed),
        translation=(float(rng.uniform(-shift, shift)), float(rng.uniform(-shift, shift))),
        rotation=float(rng.uniform(-12.0, 12.0)),
        brightness_jitter=float(rng.uniform(0.8, 1.2)),
        background_texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


def _body_coords(params: RenderParams, size: int):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx = size / 2 + params.translation[0]
    cy = size / 2 + params.translation[1]
    t = np.deg2rad(params.rotation)
    dx, dy = x - cx, y - cy
    u = (dx * np.cos(t) + dy * np.sin(t)) / (BODY_AXES[0] * size)
    v = (-dx * np.sin(t) + dy * np.cos(t)) / (BODY_AXES[1] * size)
    return u, v


def _background(seed: int, size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 15485863])
    y, x = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(6):
        fx, fy = rng.uniform(-4, 4, 2)
        field += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fx * x + fy * y) + rng.uniform(0, 2 * np.pi))
    field /= 6.0
    tint = np.array([0.46, 0.52, 0.56]) + rng.uniform(-0.05, 0.05, 3)
    img = tint + 0.22 * field[..., None] + rng.normal(0, 0.03, (size, size, 3))
    return img


def pattern_field(identity: PatternIdentity, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Stripe intensity in [0, 1] at body coordinates (1 = dark stripe)."""
    f = np.zeros_like(u)
    for freq, ori, ph in zip(identity.stripe_frequencies, identity.stripe_orientations, identity.phase_offsets):
        # v spans the body height; u is rescaled so frequencies are isotropic on the body
        proj = np.cos(ori) * v + np.sin(ori) * u * (BODY_AXES[0] / BODY_AXES[1])
        f += np.cos(np.pi * freq * proj + ph)
    f /= len(identity.stripe_frequencies)
    for (cu, cv), r in zip(identity.spot_centers, identity.spot_radii):
        d2 = (u - cu) ** 2 * (BODY_AXES[0] / BODY_AXES[1]) ** 2 + (v - cv) ** 2
        f += 1.2 * np.exp(-d2 / (2 * r * r))
    return 1.0 / (1.0 + np.exp(-10.0 * (f - 0.15)))


def render_regions(params: RenderParams, size: int) -> RegionMaskSet:
    u, v = _body_coords(params, size)
    body = u ** 2 + v ** 2 <= 1.0
    pattern = (u / PATTERN_SCALE[0]) ** 2 + (v / PATTERN_SCALE[1]) ** 2 <= 1.0
    inner = (u / FISH_INNER_SCALE[0]) ** 2 + (v / FISH_INNER_SCALE[1]) ** 2 <= 1.0
    fish = body & ~inner
    return RegionMaskSet(background=(~body).astype(np.float32), fish=fish.astype(np.float32),
                         pattern=pattern.astype(np.float32))


def render_sample(identity: PatternIdentity, params: RenderParams, size: int = 64,
                  label: Optional[int] = None, source_id: str = "") -> tuple[Sample, RegionMaskSet]:
    """Render one image of ``identity`` and its region annotations.

    The image carries an all-zero mask. Pixel values are quantised to 8-bit
    levels and kept strictly positive, so the image survives a PNG round trip
    unchanged and every region pixel is non-zero.
    """
    if size < 32:
        raise DataError(f"render size must be >= 32, got {size}")
    u, v = _body_coords(params, size)
    r2 = u ** 2 + v ** 2
    body = r2 <= 1.0
    img = _background(params.background_texture_seed, size)
    base = np.asarray(identity.base_color)
    shade = (1.0 - 0.18 * np.clip(v, -1, 1) ** 2)[..., None]
    stripes = (pattern_field(identity, u, v) * np.clip(1.4 - r2, 0, 1))[..., None]
    fish_rgb = shade * ((1 - stripes) * base + stripes * STRIPE_COLOR)
    img = np.where(body[..., None], fish_rgb, img) * params.brightness_jitter
    img = np.clip(np.round(np.clip(img, 0, 1) * 255.0), 1, 255) / 255.0
    sample = Sample(img.astype(np.float32), np.zeros((size, size), np.float32), label, source_id)
    return sample, render_regions(params, size)


def inpainting_mask(regions: RegionMaskSet, seed: int, min_cover: float = 0.5) -> np.ndarray:
    """Blocky mask inside the pattern region covering at least ``min_cover`` of it."""
    rng = np.random.default_rng([int(seed), 31337])
    pattern = regions.pattern.astype(bool)
    size = pattern.shape[0]
    target = rng.uniform(max(min_cover, 0.55), 0.8)
    ys, xs = np.nonzero(pattern)
    mask = np.zeros_like(pattern)
    while mask[pattern].mean() < target:
        i = rng.integers(len(ys))
        h, w = rng.integers(size // 10, size // 4, 2)
        y0, x0 = ys[i] - h // 2, xs[i] - w // 2
        mask[max(y0, 0):y0 + h, max(x0, 0):x0 + w] = True
        mask &= pattern
    return mask.astype(np.float32)


class SyntheticDataset(NamedTuple):
    classification: list   # labelled Samples with empty masks
    inpainting: list       # unlabelled Samples with pattern masks
    regions: list          # RegionMaskSet per classification sample
    identities: list


def generate_dataset(n_individuals: int, n_per_individual: int, seed: int, size: int = 64,
                     n_inpaint_per_individual: Optional[int] = None) -> SyntheticDataset:
    """Classification renders, inpainting pairs (separate renders) and region masks.

    Inpainting pairs default to a quarter of the classification count per
    individual, roughly the ratio of inpainting to classification images in
    the zebrafish data.
    """
    if n_individuals < 2:
        raise DataError(f"n_individuals must be >= 2, got {n_individuals}")
    if n_per_individual < 4:
        raise DataError(f"n_per_individual must be >= 4, got {n_per_individual}")
    if n_inpaint_per_individual is None:
        n_inpaint_per_individual = max(1, n_per_individual // 4)
    identities = [generate_identity(seed * 1000 + i) for i in range(n_individuals)]
    pose_rng = np.random.default_rng([int(seed), 2])
    classification, regions, inpainting = [], [], []
    for i, ident in enumerate(identities):
        for j in range(n_per_individual):
            params = random_render_params(int(pose_rng.integers(2**31 - 1)), size)
            s, r = render_sample(ident, params, size, label=i, source_id=f"id{i}_c{j:04d}")
            classification.append(s)
            regions.append(r)
    for i, ident in enumerate(identities):
        for j in range(n_inpaint_per_individual):
            params = random_render_params(int(pose_rng.integers(2**31 - 1)), size)
            s, r = render_sample(ident, params, size, source_id=f"id{i}_p{j:04d}")
            mask = inpainting_mask(r, params.pose_seed)
            inpainting.append(Sample(s.image, mask, None, s.source_id))
    return SyntheticDataset(classification, inpainting, regions, identities)

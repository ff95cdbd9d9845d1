"""Experiment configuration stored as an INI document.

Grammar (every key optional, defaults shown by ``patternid`` ``--help`` and the README)::

    [experiment]  seed, out, archs (comma list), base_channels
    [data]        source = synthetic | manifest; classification_manifest, inpainting_manifest,
                  n_individuals, n_per_individual, n_inpaint_per_individual, image_size
    [inpainting]  epochs, batch_size, lr, val_every
    [classification]  epochs, batch_size, lr_shallow, lr_deep, modes, gradcam_each_epoch
    [ablation]    backbones, modes, conditions, per_class, epochs, source = all | test
    [analytics]   k, projections, standardize, refined_mode
    [gradcam]     alpha, layer
    [loss_weights.<arch>]  component = weight

Lists are comma separated; an empty value means "not set".
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .ablation import CONDITIONS, MODES
from .errors import ConfigError
from .inpainting.models import ARCHS, LOSS_COMPONENTS


@dataclass
class ExperimentSection:
    seed: int = 0
    out: str = "runs/default"
    archs: tuple = ARCHS
    base_channels: int = 16


@dataclass
class DataSection:
    source: str = "synthetic"
    classification_manifest: str = ""
    inpainting_manifest: str = ""
    n_individuals: int = 6
    n_per_individual: int = 100
    n_inpaint_per_individual: Optional[int] = None
    image_size: int = 64


@dataclass
class InpaintingSection:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    val_every: int = 0


@dataclass
class ClassificationSection:
    epochs: int = 15
    batch_size: int = 8
    lr_shallow: float = 1e-3
    lr_deep: float = 1e-4
    modes: tuple = MODES
    gradcam_each_epoch: bool = True


@dataclass
class AblationSection:
    backbones: tuple = (*ARCHS, "baseline")
    modes: tuple = MODES
    conditions: tuple = CONDITIONS
    per_class: Optional[int] = 300
    epochs: Optional[int] = None   # None: classification epochs
    source: str = "all"


@dataclass
class AnalyticsSection:
    k: int = 6
    projections: tuple = ("pca",)
    standardize: bool = False
    refined_mode: str = "deep"


@dataclass
class GradcamSection:
    alpha: float = 0.5
    layer: str = ""


SECTIONS = {
    "experiment": ExperimentSection, "data": DataSection, "inpainting": InpaintingSection,
    "classification": ClassificationSection, "ablation": AblationSection,
    "analytics": AnalyticsSection, "gradcam": GradcamSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    inpainting: InpaintingSection = field(default_factory=InpaintingSection)
    classification: ClassificationSection = field(default_factory=ClassificationSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    analytics: AnalyticsSection = field(default_factory=AnalyticsSection)
    gradcam: GradcamSection = field(default_factory=GradcamSection)
    loss_weights: dict = field(default_factory=dict)   # arch -> {component: weight}

    def __post_init__(self):
        self.validate()

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def validate(self):
        for a in self.experiment.archs:
            if a not in ARCHS:
                raise ConfigError(f"unknown arch {a!r}; valid options: {', '.join(ARCHS)}")
        for b in self.ablation.backbones:
            if b not in ARCHS and b != "baseline":
                raise ConfigError(f"unknown ablation backbone {b!r}; valid: {', '.join(ARCHS)}, baseline")
        for m in (*self.classification.modes, *self.ablation.modes, self.analytics.refined_mode):
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}; valid: {', '.join(MODES)}")
        for c in self.ablation.conditions:
            if c not in CONDITIONS:
                raise ConfigError(f"unknown condition {c!r}; valid: {', '.join(CONDITIONS)}")
        if self.data.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source must be 'synthetic' or 'manifest', got {self.data.source!r}")
        if self.data.source == "manifest" and not self.data.classification_manifest:
            raise ConfigError("data.source = manifest needs data.classification_manifest")
        if self.ablation.source not in ("all", "test"):
            raise ConfigError(f"ablation.source must be 'all' or 'test', got {self.ablation.source!r}")
        for arch, weights in self.loss_weights.items():
            if arch not in ARCHS:
                raise ConfigError(f"loss_weights.{arch}: unknown arch; valid options: {', '.join(ARCHS)}")
            bad = set(weights) - set(LOSS_COMPONENTS)
            if bad:
                raise ConfigError(f"loss_weights.{arch}: unknown components {sorted(bad)}")
        for name, value in (("inpainting.epochs", self.inpainting.epochs), ("inpainting.batch_size", self.inpainting.batch_size),
                            ("classification.epochs", self.classification.epochs),
                            ("classification.batch_size", self.classification.batch_size)):
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")

    # ----------------------------------------------------------- serialisation

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        for arch in sorted(self.loss_weights):
            cp[f"loss_weights.{arch}"] = {k: repr(float(v)) for k, v in sorted(self.loss_weights[arch].items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        kwargs, weights = {}, {}
        for sec in cp.sections():
            if sec.startswith("loss_weights."):
                weights[sec.split(".", 1)[1]] = {k: _parse_float(f"{sec}.{k}", v) for k, v in cp[sec].items()}
                continue
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section [{sec}]; valid: {', '.join(SECTIONS)}, loss_weights.<arch>")
            klass = SECTIONS[sec]
            defaults = klass()
            known = {f.name: f for f in fields(klass)}
            values = {}
            for key, raw in cp[sec].items():
                if key not in known:
                    raise ConfigError(f"unknown key {sec}.{key}; valid: {', '.join(known)}")
                values[key] = _parse(f"{sec}.{key}", raw, getattr(defaults, key), known[key].type)
            kwargs[sec] = klass(**values)
        return cls(**kwargs, loss_weights=weights)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_ini(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_ini(path.read_text(encoding="utf-8"))


def _format(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse_float(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _parse(key: str, raw: str, default, annotation: str):
    raw = raw.strip()
    optional = "Optional" in str(annotation)
    if raw == "" and (optional or default is None):
        return None
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if isinstance(default, int) or "int" in str(annotation):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        return _parse_float(key, raw)
    return raw

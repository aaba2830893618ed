"""Run configuration: a flat ``section.key = value`` text file.

Example::

    # comments start with '#'
    data.root = runs/shapes
    harvest.top_p = 3
    loss.lambda_crf = 2e-9

Empty values mean "use the size-dependent default". Command-line
``--set key=value`` pairs override file values.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from dips.errors import ConfigurationError


@dataclass
class DataSection:
    root: str = ""
    image_size: int = 64
    resize_to: int = 72
    augment: bool = True


@dataclass
class BackboneSection:
    provider: str = "synthetic"  # synthetic | pretrained
    checkpoint: str = ""
    patch_size: int = 4
    num_blocks: int = 12
    embed_dim: int = 384
    num_heads: int = 6
    num_selected: int = 4
    noise_sigma: float = 0.03
    distractor_count: int = 1


@dataclass
class ClassifierSection:
    provider: str = "synthetic"  # synthetic | pretrained
    checkpoint: str = ""
    arch: str = "resnet18"
    temperature: float | None = None
    ref_area: float | None = None


@dataclass
class HarvestSection:
    min_region_size_frac: float = 0.01
    top_p: int = 3
    min_score: float | None = None
    blur_sigma: float | None = None
    seed: int = 0
    cache_dir: str = ""


@dataclass
class SamplerSection:
    fg_top_frac: float = 0.3
    bg_top_frac: float = 0.3
    fg_count: int | None = None
    bg_count: int | None = None
    seed: int = 0


@dataclass
class ModelSection:
    encoder_depth: int = 4
    base_channels: int = 16
    max_channels: int = 128
    init_seed: int = 0


@dataclass
class LossSection:
    lambda_cls: float = 1.0
    lambda_cpa: float = 1.0
    lambda_crf: float = 2e-9
    crf_sigma_xy: float = 15.0
    crf_sigma_rgb: float = 0.1
    crf_dense_max_pixels: int = 32 * 32
    losses: str = "cpa+crf+cls"


@dataclass
class OptimSection:
    lr: float = 1e-3
    decay_epoch: int = 15
    decay_factor: float = 0.1
    batch_size: int = 16
    epochs: int = 30
    weight_decay: float = 0.0


@dataclass
class TrainSection:
    seed: int = 0
    val_every: int = 5
    sample_after_augment: bool = True
    max_train_images: int | None = None
    log_harvest: bool = False


SECTIONS = {
    "data": DataSection,
    "backbone": BackboneSection,
    "classifier": ClassifierSection,
    "harvest": HarvestSection,
    "sampler": SamplerSection,
    "model": ModelSection,
    "loss": LossSection,
    "optim": OptimSection,
    "train": TrainSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    harvest: HarvestSection = field(default_factory=HarvestSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)

    def to_flat(self):
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            for f in fields(sec):
                v = getattr(sec, f.name)
                out[f"{name}.{f.name}"] = "" if v is None else v
        return out

    def dumps(self):
        lines = []
        for k, v in self.to_flat().items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    def updated(self, values):
        """Copy with ``{"section.key": value}`` overrides applied (values may be strings)."""
        cfg = RunConfig(**{n: replace(getattr(self, n)) for n in SECTIONS})
        for key, raw in values.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigurationError(f"unknown config key {key!r}")
            sec = getattr(cfg, section)
            ftypes = {f.name: f for f in fields(sec)}
            if name not in ftypes:
                raise ConfigurationError(f"unknown config key {key!r}")
            setattr(sec, name, _coerce(key, raw, ftypes[name], getattr(SECTIONS[section](), name)))
        return cfg

    @classmethod
    def from_file(cls, path, overrides=None):
        values = parse_flat(Path(path).read_text())
        values.update(overrides or {})
        return cls().updated(values)

    @classmethod
    def from_flat(cls, values):
        return cls().updated(values)

    def resolve_path(self, p):
        """Relative backbone/classifier checkpoints resolve against ``$DIPS_CACHE_DIR``."""
        if not p:
            return None
        path = Path(p)
        if not path.is_absolute() and os.environ.get("DIPS_CACHE_DIR"):
            cached = Path(os.environ["DIPS_CACHE_DIR"]) / path
            if cached.exists() or not path.exists():
                return cached
        return path


def parse_flat(text):
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {n}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigurationError(f"override {pair!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def _coerce(key, raw, f, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    typ = str(f.type)
    optional = "None" in typ
    if text == "" or text.lower() == "none":
        if optional:
            return None
        if "str" in typ:
            return ""
        raise ConfigurationError(f"{key} needs a value")
    try:
        if "bool" in typ:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in typ:
            return int(text)
        if "float" in typ:
            return float(text)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
    return text

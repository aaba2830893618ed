"""Synthetic shapes dataset, manifest files and training-time augmentation.

Manifest format, one record per line, whitespace separated::

    <image path> <class index> <x0 y0 x1 y1> [<x0 y0 x1 y1> ...] [<mask path>]

Paths are relative to the manifest's directory. Boxes are half-open.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from dips.errors import ConfigurationError, InvalidInputError, InvalidParameterError

CLASS_COLORS = (
    (0.85, 0.20, 0.20),
    (0.20, 0.80, 0.25),
    (0.20, 0.30, 0.85),
    (0.85, 0.80, 0.20),
    (0.80, 0.20, 0.80),
    (0.20, 0.80, 0.80),
    (0.95, 0.55, 0.15),
    (0.55, 0.25, 0.90),
)
SHAPES = ("disk", "square", "triangle", "diamond", "cross", "ellipse", "ring", "hexagon")


@dataclass
class SyntheticDatasetSpec:
    num_images: int = 650
    image_size: int = 64
    num_classes: int = 5
    split_fractions: tuple = (500 / 650, 50 / 650, 100 / 650)  # train, val, test
    target_radius: tuple = (9.0, 13.0)
    distractor_scale: tuple = (0.35, 0.55)
    max_distractors: int = 2
    texture_amplitude: float = 0.12
    background_level: tuple = (0.42, 0.58)
    background_variation: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_COLORS):
            raise InvalidParameterError(f"num_classes must lie in [1, {len(CLASS_COLORS)}]")
        if self.num_images < 1 or self.image_size < 16:
            raise InvalidParameterError("need at least one image of size >= 16")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or len(self.split_fractions) != 3:
            raise InvalidParameterError("split_fractions must be three numbers summing to 1")

    @property
    def class_colors(self):
        return [CLASS_COLORS[k] for k in range(self.num_classes)]

    @property
    def class_shapes(self):
        return [SHAPES[k] for k in range(self.num_classes)]

    def split_counts(self):
        n_train = int(round(self.split_fractions[0] * self.num_images))
        n_val = int(round(self.split_fractions[1] * self.num_images))
        return n_train, n_val, self.num_images - n_train - n_val

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# --------------------------------------------------------------------------
# rendering


def shape_mask(kind, size, cy, cx, r, angle=0.0):
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disk":
        return u ** 2 + v ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if kind == "triangle":
        h = r * 1.1
        return (v <= h * 0.6) & (v >= -h) & (np.abs(u) <= (v + h) * 0.62)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r * 1.2
    if kind == "cross":
        a = r * 0.42
        return ((np.abs(u) <= a) & (np.abs(v) <= r)) | ((np.abs(v) <= a) & (np.abs(u) <= r))
    if kind == "ellipse":
        return (u / (r * 1.25)) ** 2 + (v / (r * 0.7)) ** 2 <= 1
    if kind == "ring":
        d = u ** 2 + v ** 2
        return (d <= r ** 2) & (d >= (r * 0.45) ** 2)
    if kind == "hexagon":
        return (np.abs(v) <= r * 0.87) & (np.abs(v) * 0.577 + np.abs(u) <= r)
    raise InvalidParameterError(f"unknown shape {kind!r}")


def _background(spec, rng):
    size = spec.image_size
    level = rng.uniform(*spec.background_level)
    field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8, mode="wrap")
    field_ = field_ / (np.abs(field_).max() + 1e-12) * spec.background_variation
    tint = rng.uniform(-0.03, 0.03, size=3)
    return np.clip(level + field_[..., None] + tint, 0.0, 1.0)


def _paint(img, mask, color, amplitude, rng):
    noise = rng.choice([-1.0, 1.0], size=mask.shape)
    tex = np.asarray(color)[None, None, :] + amplitude * noise[..., None]
    img[mask] = np.clip(tex[mask], 0.0, 1.0)


def render_sample(spec, label, rng):
    """One image with a target of class ``label`` and 0..max distractors.

    Returns ``(image, instances)``; the target is instance 1.
    """
    size = spec.image_size
    img = _background(spec, rng)
    instances = np.zeros((size, size), dtype=np.uint8)
    r = rng.uniform(*spec.target_radius) * size / 64
    margin = int(math.ceil(r * 1.3)) + 1
    cy, cx = rng.uniform(margin, size - margin, size=2)
    target = shape_mask(spec.class_shapes[label], size, cy, cx, r, rng.uniform(0, 2 * math.pi))
    instances[target] = 1
    _paint(img, target, spec.class_colors[label], spec.texture_amplitude, rng)

    others = [k for k in range(spec.num_classes) if k != label]
    n_distractors = rng.integers(0, spec.max_distractors + 1) if others else 0
    keepout = ndimage.binary_dilation(target, iterations=3)
    for j in range(n_distractors):
        k = others[rng.integers(len(others))]
        for _ in range(50):
            rd = r * rng.uniform(*spec.distractor_scale)
            m = int(math.ceil(rd * 1.3)) + 1
            dy, dx = rng.uniform(m, size - m, size=2)
            mask = shape_mask(spec.class_shapes[k], size, dy, dx, rd, rng.uniform(0, 2 * math.pi))
            if mask.any() and not (mask & keepout).any():
                instances[mask] = 2 + j
                _paint(img, mask, spec.class_colors[k], spec.texture_amplitude, rng)
                keepout |= ndimage.binary_dilation(mask, iterations=3)
                break
    return img, instances


def tight_box(mask):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise InvalidInputError("empty mask has no box")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# --------------------------------------------------------------------------
# manifest


@dataclass
class ManifestRecord:
    image_path: str
    class_index: int
    boxes: list
    mask_path: str | None = None

    @property
    def image_id(self):
        return Path(self.image_path).stem

    def to_line(self):
        parts = [self.image_path, str(self.class_index)]
        for b in self.boxes:
            parts.extend(str(int(v)) for v in b)
        if self.mask_path:
            parts.append(self.mask_path)
        return " ".join(parts)

    @classmethod
    def from_line(cls, line):
        tok = line.split()
        if len(tok) < 6:
            raise InvalidInputError(f"manifest line needs path, class and one box: {line!r}")
        path, cls_idx, rest = tok[0], int(tok[1]), tok[2:]
        nums = []
        while rest and _is_int(rest[0]):
            nums.append(int(rest.pop(0)))
        if not nums or len(nums) % 4:
            raise InvalidInputError(f"box coordinates must come in groups of four: {line!r}")
        if len(rest) > 1:
            raise InvalidInputError(f"trailing tokens in manifest line: {line!r}")
        boxes = [tuple(nums[i:i + 4]) for i in range(0, len(nums), 4)]
        return cls(path, cls_idx, boxes, rest[0] if rest else None)


def _is_int(s):
    try:
        int(s)
    except ValueError:
        return False
    return True


def read_manifest(path):
    with open(path) as fh:
        return [ManifestRecord.from_line(line) for line in fh
                if line.strip() and not line.lstrip().startswith("#")]


def write_manifest(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_line() + "\n")


def save_image(path, image):
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path, optimize=False)


def load_image(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path):
    return np.asarray(Image.open(path)) > 0


def generate_synthetic_dataset(spec, out_dir, force=False):
    """Write images, masks, instance maps, split manifests and ``dataset.json``.

    Class labels are a shuffled, balanced tiling of ``range(K)``. Refuses to
    write into a non-empty directory unless ``force``.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigurationError(f"{out} is not empty; pass force=True to overwrite")
        shutil.rmtree(out)
    for sub in ("images", "masks", "instances"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.resize(np.arange(spec.num_classes), spec.num_images))
    records = []
    for i, label in enumerate(labels.tolist()):
        img, inst = render_sample(spec, label, np.random.default_rng([spec.seed, i]))
        name = f"{i:06d}.png"
        save_image(out / "images" / name, img)
        Image.fromarray(((inst == 1) * 255).astype(np.uint8)).save(out / "masks" / name)
        Image.fromarray(inst).save(out / "instances" / name)
        records.append(ManifestRecord(f"images/{name}", label, [tight_box(inst == 1)], f"masks/{name}"))

    n_train, n_val, _ = spec.split_counts()
    splits = {"train": records[:n_train], "val": records[n_train:n_train + n_val],
              "test": records[n_train + n_val:]}
    for name, recs in splits.items():
        write_manifest(out / f"{name}.txt", recs)
    meta = {"spec": spec.to_dict(), "class_colors": spec.class_colors,
            "class_shapes": spec.class_shapes, "num_classes": spec.num_classes}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


# --------------------------------------------------------------------------
# loading and augmentation


@dataclass
class Sample:
    image_id: str
    image: np.ndarray  # H x W x 3 float32
    label: int
    boxes: list
    mask: np.ndarray | None = None
    instances: np.ndarray | None = None


class ManifestDataset:
    """Samples of one split, loaded lazily from a manifest."""

    def __init__(self, root, split="train", manifest=None):
        self.root = Path(root)
        path = Path(manifest) if manifest else self.root / f"{split}.txt"
        if not path.is_file():
            raise ConfigurationError(f"manifest not found: {path}")
        self.base = path.parent
        self.records = read_manifest(path)
        meta = self.root / "dataset.json"
        self.meta = json.loads(meta.read_text()) if meta.is_file() else {}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        r = self.records[i]
        image = load_image(self.base / r.image_path)
        mask = load_mask(self.base / r.mask_path) if r.mask_path else None
        inst = None
        inst_path = self.base / "instances" / Path(r.image_path).name
        if inst_path.is_file():
            inst = np.asarray(Image.open(inst_path))
        return Sample(r.image_id, image, r.class_index, list(r.boxes), mask, inst)


def _resize(arr, size, nearest):
    if arr.ndim == 3:
        pil = Image.fromarray(np.round(arr * 255).astype(np.uint8))
        out = pil.resize((size, size), Image.NEAREST if nearest else Image.BILINEAR)
        return np.asarray(out, dtype=np.float32) / 255.0
    pil = Image.fromarray(arr.astype(np.uint8))
    return np.asarray(pil.resize((size, size), Image.NEAREST))


def augment(sample, rng, crop_size=64, resize_to=72):
    """Resize to ``resize_to``, random-crop ``crop_size``, random horizontal flip.

    Image, mask and instance map move together; the mask-derived box is
    recomputed afterwards.
    """
    img = _resize(sample.image, resize_to, nearest=False)
    inst = None if sample.instances is None else _resize(sample.instances, resize_to, nearest=True)
    mask = None if sample.mask is None else _resize(sample.mask.astype(np.uint8), resize_to, nearest=True) > 0
    y0, x0 = rng.integers(0, resize_to - crop_size + 1, size=2)
    flip = bool(rng.integers(2))

    def crop(a):
        if a is None:
            return None
        a = a[y0:y0 + crop_size, x0:x0 + crop_size]
        return np.ascontiguousarray(a[:, ::-1] if flip else a)

    img, inst, mask = crop(img), crop(inst), crop(mask)
    boxes = [tight_box(mask)] if mask is not None and mask.any() else []
    return Sample(sample.image_id, img, sample.label, boxes, mask, inst)

"""Frozen attention and classifier providers.

Two attention providers share one call signature, ``get_attention_stack(image,
context=None)``:

* :class:`SyntheticAttentionProvider` fabricates per-head maps from the
  ground-truth instance map carried in ``context``. It stands in for a
  self-supervised transformer when no pretrained weights are around.
* :class:`PretrainedAttentionProvider` runs a DINO-style ViT checkpoint and
  reads the CLS-row attention of the last block.

Images are ``H x W x 3`` float arrays in ``[0, 1]`` throughout.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from dips.errors import ConfigurationError, InvalidInputError, InvalidParameterError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def softmax_with_temperature(s, tau=1.0):
    """Softmax of ``s / tau`` along the last axis, max-subtracted."""
    if not tau > 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau}")
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("logits must be finite")
    z = s / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    num_blocks: int = 12
    embed_dim: int = 384
    num_heads: int = 6
    input_size: tuple[int, int] = (64, 64)  # (W, H)
    temperature: float = 1.0
    num_selected: int = 4

    def __post_init__(self):
        w, h = self.input_size
        if self.patch_size < 1 or w % self.patch_size or h % self.patch_size:
            raise InvalidParameterError(
                f"input size {self.input_size} not divisible by patch size {self.patch_size}")
        if self.num_heads < 1 or self.num_blocks < 1 or self.embed_dim < 1:
            raise InvalidParameterError("num_heads, num_blocks and embed_dim must be >= 1")
        if not self.temperature > 0:
            raise InvalidParameterError("temperature must be positive")
        if not 1 <= self.num_selected <= self.num_heads:
            raise InvalidParameterError("num_selected must lie in [1, num_heads]")

    @property
    def grid(self):
        w, h = self.input_size
        return h // self.patch_size, w // self.patch_size

    @property
    def num_patches(self):
        gh, gw = self.grid
        return gh * gw


@dataclass
class AttentionStack:
    """Selected head maps followed by the all-head average (last entry)."""

    maps: np.ndarray  # (num_selected + 1, H, W)
    source_ids: list[str]

    def __post_init__(self):
        if self.maps.ndim != 3 or len(self.source_ids) != len(self.maps):
            raise InvalidInputError("maps must be (n, H, W) with one source id per map")

    def __len__(self):
        return len(self.maps)

    @property
    def shape(self):
        return self.maps.shape[1:]

    @property
    def average(self):
        return self.maps[-1]


@dataclass
class AttentionContext:
    """Per-image side information for the synthetic provider.

    ``instances`` labels the target object 1 and distractor objects 2, 3, ...
    """

    instances: np.ndarray | None = None
    seed: int | tuple = 0


@dataclass
class ClassifierOutput:
    logits: np.ndarray
    probabilities: np.ndarray

    @classmethod
    def from_logits(cls, logits, tau=1.0):
        logits = np.asarray(logits, dtype=np.float64)
        return cls(logits, softmax_with_temperature(logits, tau))


def upsample_bilinear(grids, size):
    """Bilinearly resize ``(n, h, w)`` grids to ``size = (H, W)``."""
    t = torch.as_tensor(np.ascontiguousarray(grids), dtype=torch.float64)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].numpy()


def _check_image(image, input_size):
    image = np.asarray(image)
    w, h = input_size
    if image.ndim != 3 or image.shape != (h, w, 3):
        raise InvalidInputError(f"expected image of shape {(h, w, 3)}, got {image.shape}")
    return image


# --------------------------------------------------------------------------
# synthetic attention


class SyntheticAttentionProvider:
    """Mask-derived stand-in for transformer attention.

    Every head is a blurred indicator of some region: the whole target, a
    random part of it, or a distractor region (another object if one exists,
    otherwise a background blob). Indicators are pooled to the patch grid,
    perturbed with Gaussian noise and bilinearly upsampled back, so the maps
    carry the same coarse blockiness as real patch attention. Head order is
    shuffled per image.
    """

    def __init__(self, config=None, noise_sigma=0.03, distractor_count=1,
                 part_fraction=(0.5, 1.0)):
        self.config = config or BackboneConfig()
        if not 0 <= distractor_count < self.config.num_heads:
            raise InvalidParameterError("distractor_count must be in [0, num_heads)")
        if noise_sigma < 0:
            raise InvalidParameterError("noise_sigma must be >= 0")
        self.noise_sigma = float(noise_sigma)
        self.distractor_count = int(distractor_count)
        self.part_fraction = tuple(part_fraction)

    def head_kinds(self, rng):
        n = self.config.num_heads
        kinds = ["whole"] + ["distractor"] * self.distractor_count
        kinds += ["part"] * (n - len(kinds))
        return [kinds[i] for i in rng.permutation(n)]

    def _part(self, target, rng):
        ys, xs = np.nonzero(target)
        i = rng.integers(len(ys))
        d2 = (ys - ys[i]) ** 2 + (xs - xs[i]) ** 2
        frac = rng.uniform(*self.part_fraction)
        r2 = np.quantile(d2, frac)
        part = np.zeros_like(target)
        keep = d2 <= r2
        part[ys[keep], xs[keep]] = True
        return part

    def _background_blob(self, target, rng):
        h, w = target.shape
        far = ndimage.distance_transform_edt(~target) > 6
        ys, xs = np.nonzero(far)
        if len(ys) == 0:
            ys, xs = np.nonzero(~target)
        i = rng.integers(len(ys))
        radius = max(2.0, math.sqrt(target.sum() / math.pi) * rng.uniform(0.4, 0.7))
        yy, xx = np.mgrid[:h, :w]
        return ((yy - ys[i]) ** 2 + (xx - xs[i]) ** 2 <= radius ** 2) & ~target

    def head_maps(self, image, context):
        cfg = self.config
        image = _check_image(image, cfg.input_size)
        if context is None or context.instances is None:
            raise InvalidInputError("synthetic provider needs an instance map in the context")
        instances = np.asarray(context.instances)
        target = instances == 1
        if not target.any():
            raise InvalidInputError("instance map has no target pixels")
        others = [k for k in np.unique(instances) if k >= 2]
        seed = context.seed if isinstance(context.seed, (tuple, list)) else (context.seed,)
        rng = np.random.default_rng([*seed, 0xA77])

        s = cfg.patch_size
        gh, gw = cfg.grid
        grids = np.empty((cfg.num_heads, gh, gw))
        for h, kind in enumerate(self.head_kinds(rng)):
            if kind == "whole":
                region = target
            elif kind == "part":
                region = self._part(target, rng)
            elif others:
                region = instances == others[rng.integers(len(others))]
            else:
                region = self._background_blob(target, rng)
            soft = ndimage.gaussian_filter(region.astype(np.float64), sigma=s / 2)
            pooled = soft.reshape(gh, s, gw, s).mean(axis=(1, 3))
            pooled = pooled / max(pooled.max(), 1e-12) * rng.uniform(0.6, 1.0)
            pooled = pooled + rng.normal(0.0, self.noise_sigma, pooled.shape)
            grids[h] = np.clip(pooled, 0.0, None)
        return upsample_bilinear(grids, image.shape[:2])

    def get_attention_stack(self, image, context=None):
        heads = self.head_maps(image, context)
        k = self.config.num_selected
        maps = np.concatenate([heads[:k], heads.mean(axis=0, keepdims=True)])
        ids = [f"head{i}" for i in range(k)] + ["mean"]
        return AttentionStack(maps, ids)


# --------------------------------------------------------------------------
# pretrained ViT attention


class _Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x), attn


class _Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = _Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = _Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class _PatchEmbed(nn.Module):
    def __init__(self, patch_size, dim):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class VisionTransformer(nn.Module):
    """Plain ViT with DINO/timm parameter names, so published weights load as-is."""

    def __init__(self, patch_size, embed_dim, depth, num_heads, num_patches):
        super().__init__()
        self.patch_embed = _PatchEmbed(patch_size, embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, embed_dim))
        self.blocks = nn.ModuleList([_Block(embed_dim, num_heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)

    def _pos_embed(self, gh, gw):
        n = self.pos_embed.shape[1] - 1
        if n == gh * gw:
            return self.pos_embed
        side = int(round(math.sqrt(n)))
        patch = self.pos_embed[:, 1:].reshape(1, side, side, -1).permute(0, 3, 1, 2)
        patch = F.interpolate(patch, size=(gh, gw), mode="bicubic", align_corners=False)
        return torch.cat([self.pos_embed[:, :1], patch.permute(0, 2, 3, 1).flatten(1, 2)], dim=1)

    def last_attention(self, x):
        """Attention weights ``(B, heads, N + 1, N + 1)`` of the final block."""
        b, _, h, w = x.shape
        s = self.patch_embed.proj.kernel_size[0]
        tokens = self.patch_embed(x)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        tokens = tokens + self._pos_embed(h // s, w // s)
        attn = None
        for blk in self.blocks:
            tokens, attn = blk(tokens)
        return attn


def _strip_state_dict(state):
    for key in ("teacher", "state_dict", "model"):
        if isinstance(state, dict) and key in state and isinstance(state[key], dict):
            state = state[key]
    out = {}
    for k, v in state.items():
        for prefix in ("module.", "backbone."):
            if k.startswith(prefix):
                k = k[len(prefix):]
        if k.startswith("head."):
            continue
        out[k] = v
    return out


def weights_digest(module):
    """SHA-256 over a module's state dict (names, dtypes, shapes and bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class PretrainedAttentionProvider:
    """CLS-token attention of the last block of a frozen ViT checkpoint.

    Per head we take the CLS row over patch tokens, reshape it to the patch
    grid and upsample bilinearly to pixel resolution.
    """

    def __init__(self, model, config):
        self.config = config
        self.model = model.eval().requires_grad_(False)
        self._mean = torch.tensor(IMAGENET_MEAN, dtype=torch.float32).view(1, 3, 1, 1)
        self._std = torch.tensor(IMAGENET_STD, dtype=torch.float32).view(1, 3, 1, 1)

    @classmethod
    def from_checkpoint(cls, path, config):
        path = Path(path) if path else None
        if path is None or not path.is_file():
            raise ConfigurationError(f"backbone checkpoint not found: {path}")
        try:
            state = _strip_state_dict(torch.load(path, map_location="cpu", weights_only=True))
            dim = state["cls_token"].shape[-1]
            patch = state["patch_embed.proj.weight"].shape[-1]
            depth = 1 + max(int(k.split(".")[1]) for k in state if k.startswith("blocks."))
            n_pos = state["pos_embed"].shape[1] - 1
        except Exception as exc:
            raise ConfigurationError(f"unreadable backbone checkpoint {path}: {exc}") from exc
        if patch != config.patch_size or dim != config.embed_dim or depth != config.num_blocks:
            raise ConfigurationError(
                f"checkpoint (patch={patch}, dim={dim}, depth={depth}) does not match config "
                f"(patch={config.patch_size}, dim={config.embed_dim}, depth={config.num_blocks})")
        if dim % config.num_heads:
            raise ConfigurationError(f"embed_dim {dim} not divisible by num_heads {config.num_heads}")
        model = VisionTransformer(patch, dim, depth, config.num_heads, n_pos)
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ConfigurationError(f"backbone checkpoint {path} does not fit: {exc}") from exc
        return cls(model, config)

    @torch.no_grad()
    def head_maps(self, image):
        image = _check_image(image, self.config.input_size)
        x = torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=torch.float32)[None]
        x = (x - self._mean) / self._std
        attn = self.model.last_attention(x)
        gh, gw = self.config.grid
        cls_rows = attn[0, :, 0, 1:].reshape(-1, gh, gw).double().numpy()
        return np.clip(upsample_bilinear(cls_rows, image.shape[:2]), 0.0, None)

    def get_attention_stack(self, image, context=None):
        heads = self.head_maps(image)
        k = self.config.num_selected
        maps = np.concatenate([heads[:k], heads.mean(axis=0, keepdims=True)])
        return AttentionStack(maps, [f"head{i}" for i in range(k)] + ["mean"])


# --------------------------------------------------------------------------
# frozen classifiers


def _gaussian_kernel(sigma, dtype):
    radius = int(math.ceil(3 * sigma))
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum(), radius


def gaussian_blur_t(x, sigma):
    """Separable depthwise Gaussian blur of a ``(B, C, H, W)`` tensor."""
    k, r = _gaussian_kernel(sigma, x.dtype)
    c = x.shape[1]
    x = F.pad(x, (r, r, r, r), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1).contiguous(), groups=c)
    return F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1).contiguous(), groups=c)


class FrozenClassifier(nn.Module):
    """Base class: ``forward`` maps ``(B, 3, H, W)`` images to logits."""

    temperature = 1.0
    num_classes = 0
    fill = 0.0  # input value that the network sees as zero (its input mean)

    def fill_tensor(self, like):
        return torch.as_tensor(self.fill, dtype=like.dtype).reshape(1, -1, 1, 1)

    def freeze(self):
        self.eval()
        self.requires_grad_(False)
        return self

    def train(self, mode=True):
        # stays in eval mode whatever the trainer asks
        return super().train(False)

    def probabilities(self, x):
        return torch.softmax(self(x) / self.temperature, dim=-1)

    @torch.no_grad()
    def output(self, image):
        x = torch.as_tensor(np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)),
                            dtype=torch.float32)[None]
        logits = self(x)[0].double().numpy()
        return ClassifierOutput.from_logits(logits, self.temperature)

    def classify(self, image, class_index):
        if not 0 <= class_index < self.num_classes:
            raise InvalidInputError(f"class index {class_index} outside [0, {self.num_classes})")
        return float(self.output(image).probabilities[class_index])

    @torch.no_grad()
    def classify_batch(self, images, class_index):
        """Confidence for ``class_index`` on each of a list of ``H x W x 3`` images."""
        if not 0 <= class_index < self.num_classes:
            raise InvalidInputError(f"class index {class_index} outside [0, {self.num_classes})")
        if len(images) == 0:
            return np.zeros(0)
        x = torch.as_tensor(np.stack(images).transpose(0, 3, 1, 2).copy(), dtype=torch.float32)
        logits = self(x).double().numpy()
        return softmax_with_temperature(logits, self.temperature)[:, class_index]


class SyntheticClassifier(FrozenClassifier):
    """Colour-and-texture evidence counter for the synthetic shapes data.

    Objects of class ``k`` are painted in ``class_colors[k]`` with fine
    per-pixel noise. A pixel counts as evidence for class ``k`` when its
    locally smoothed colour matches the prototype *and* it still carries
    high-frequency texture; blurring removes the texture, so blurred objects
    stop counting. The per-class evidence is squashed to a visibility in
    ``[eps, 1 - eps]`` and used directly as logit, so ``Softmax_tau`` of the
    logits sharpens towards the most visible class.
    """

    def __init__(self, class_colors, temperature=0.1, ref_area=80.0, color_sigma=0.15,
                 texture_floor=3e-3, eps=1e-3):
        super().__init__()
        colors = torch.as_tensor(np.asarray(class_colors), dtype=torch.float32)
        if colors.ndim != 2 or colors.shape[1] != 3:
            raise InvalidParameterError("class_colors must be (K, 3)")
        if not temperature > 0:
            raise InvalidParameterError("temperature must be positive")
        self.register_buffer("class_colors", colors)
        self.temperature = float(temperature)
        self.num_classes = colors.shape[0]
        self.ref_area = float(ref_area)
        self.color_sigma = float(color_sigma)
        self.texture_floor = float(texture_floor)
        self.eps = float(eps)
        self.fill = 0.5
        self.freeze()

    def evidence(self, x):
        """Per-class soft pixel counts, ``(B, K)``."""
        smooth = gaussian_blur_t(x, 1.0)
        energy = gaussian_blur_t(((x - smooth) ** 2).sum(1, keepdim=True), 1.0)
        texture = energy ** 3 / (energy ** 3 + self.texture_floor ** 3)
        colors = self.class_colors.to(x.dtype)
        d2 = ((smooth[:, None] - colors[None, :, :, None, None]) ** 2).sum(2)
        match = torch.exp(-d2 / (2 * self.color_sigma ** 2))
        return (match * texture).sum(dim=(-2, -1))

    def forward(self, x):
        count = self.evidence(x)
        return self.eps + (1 - 2 * self.eps) * (1 - torch.exp(-count / self.ref_area))


class PretrainedClassifier(FrozenClassifier):
    """A torchvision CNN with a K-way head, loaded from a local state dict."""

    def __init__(self, net, num_classes, temperature=1.0):
        super().__init__()
        self.net = net
        self.num_classes = int(num_classes)
        self.temperature = float(temperature)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.fill = tuple(IMAGENET_MEAN)
        self.freeze()

    @classmethod
    def from_checkpoint(cls, path, arch="resnet18", num_classes=1000, temperature=1.0):
        import torchvision

        path = Path(path) if path else None
        if path is None or not path.is_file():
            raise ConfigurationError(f"classifier checkpoint not found: {path}")
        try:
            net = getattr(torchvision.models, arch)(weights=None, num_classes=num_classes)
        except AttributeError as exc:
            raise ConfigurationError(f"unknown classifier architecture {arch!r}") from exc
        try:
            state = _strip_state_dict(torch.load(path, map_location="cpu", weights_only=True))
            state = {k: v for k, v in state.items()}
            net.load_state_dict(state, strict=True)
        except Exception as exc:
            raise ConfigurationError(f"classifier checkpoint {path} does not fit {arch}: {exc}") from exc
        return cls(net, num_classes, temperature)

    def forward(self, x):
        return self.net((x - self.mean.to(x.dtype)) / self.std.to(x.dtype))

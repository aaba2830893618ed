"""Sparse foreground/background pseudo-pixel sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from dips.errors import InvalidInputError, InvalidParameterError

log = logging.getLogger(__name__)

FG = 1
BG = 0
IGNORE = -1


@dataclass(frozen=True)
class SamplerConfig:
    fg_top_frac: float = 0.3
    bg_top_frac: float = 0.3
    fg_count: int = 30
    bg_count: int = 30
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("fg_top_frac", "bg_top_frac"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise InvalidParameterError(f"{name} must lie in (0, 1], got {v}")
        if self.fg_count < 0 or self.bg_count < 0:
            raise InvalidParameterError("pixel counts must be >= 0")

    @classmethod
    def for_image(cls, height, width, fg_top_frac=0.3, bg_top_frac=0.3, fg_count=None,
                  bg_count=None, rng_seed=0):
        """30 pixels each at 224 x 224, scaled by area."""
        scaled = max(1, int(round(30 * height * width / 224 ** 2)))
        return cls(fg_top_frac, bg_top_frac,
                   scaled if fg_count is None else fg_count,
                   scaled if bg_count is None else bg_count, rng_seed)


@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # int8 grid of FG / BG / IGNORE
    fg_pixels: np.ndarray  # (n, 2) rows of (y, x)
    bg_pixels: np.ndarray

    def __post_init__(self):
        fg = {tuple(p) for p in self.fg_pixels.tolist()}
        bg = {tuple(p) for p in self.bg_pixels.tolist()}
        assert not fg & bg, "foreground and background pixels overlap"

    @property
    def num_labeled(self):
        return len(self.fg_pixels) + len(self.bg_pixels)


def _top_pool(values, frac, descending):
    # stable sort: ties resolved by row-major index
    order = np.argsort(-values if descending else values, kind="stable")
    size = max(1, int(math.ceil(frac * len(values))))
    return order[:size]


def _weighted_without_replacement(weights, k, rng):
    """Successive sampling proportional to ``weights`` (Gumbel top-k)."""
    weights = np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore"):
        keys = np.log(weights) + rng.gumbel(size=len(weights))
    order = np.argsort(-keys, kind="stable")
    chosen = order[:k]
    # zero-weight items all carry -inf keys; pick among them uniformly
    n_pos = int((weights > 0).sum())
    if k > n_pos:
        zeros = np.flatnonzero(weights <= 0)
        chosen = np.concatenate([order[:n_pos], rng.permutation(zeros)[: k - n_pos]])
    return chosen


def _clip_count(count, pool, what):
    if count > len(pool):
        log.warning("%s pool has %d pixels, clipping count %d", what, len(pool), count)
        return len(pool)
    return count


def sample_foreground(attn_map, bbox, cfg, rng=None):
    """Draw ``fg_count`` in-box pixels, favouring strong activations.

    The pool is the top ``fg_top_frac`` of in-box pixels by activation; draws
    are without replacement with probability proportional to activation.
    Returns ``(n, 2)`` ``(y, x)`` coordinates.
    """
    attn_map = np.asarray(attn_map, dtype=np.float64)
    if np.any(attn_map < 0):
        raise InvalidInputError("attention map must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    h, w = attn_map.shape
    x0, y0, x1, y1 = bbox
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise InvalidInputError(f"bbox {bbox} outside map of size {(w, h)}")
    yy, xx = np.mgrid[y0:y1, x0:x1]
    yy, xx = yy.ravel(), xx.ravel()
    values = attn_map[yy, xx]
    if not values.any():
        log.info("all in-box activations are zero, sampling the box uniformly")
        pool = np.arange(len(values))
        weights = np.ones(len(pool))
    else:
        pool = _top_pool(values, cfg.fg_top_frac, descending=True)
        weights = values[pool]
    k = _clip_count(cfg.fg_count, pool, "foreground")
    idx = pool[_weighted_without_replacement(weights, k, rng)]
    return np.stack([yy[idx], xx[idx]], axis=1).astype(np.int64).reshape(-1, 2)


def background_pool(attn_map, frac):
    flat = np.asarray(attn_map, dtype=np.float64).ravel()
    return _top_pool(flat, frac, descending=False)


def sample_background(attn_map, cfg, rng=None, exclude=None):
    """Draw ``bg_count`` pixels uniformly from the lowest-activation pool.

    ``exclude`` is an optional set of flat indices that may not be drawn.
    """
    attn_map = np.asarray(attn_map, dtype=np.float64)
    if np.any(attn_map < 0):
        raise InvalidInputError("attention map must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    w = attn_map.shape[1]
    pool = background_pool(attn_map, cfg.bg_top_frac)
    if exclude is not None and len(exclude):
        pool = pool[~np.isin(pool, np.fromiter(exclude, dtype=np.int64))]
    k = _clip_count(cfg.bg_count, pool, "background")
    idx = rng.choice(pool, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    return np.stack([idx // w, idx % w], axis=1).astype(np.int64).reshape(-1, 2)


def build_pseudo_labels(attn_map, proposal, cfg, rng=None):
    """Compose the two samplers into a sparse label grid.

    A background draw that lands on a foreground pixel is dropped and redrawn
    from the rest of the background pool.
    """
    attn_map = np.asarray(attn_map, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    h, w = attn_map.shape
    fg = sample_foreground(attn_map, proposal.bbox, cfg, rng)
    bg = sample_background(attn_map, cfg, rng)
    fg_flat = set((fg[:, 0] * w + fg[:, 1]).tolist())
    bg_flat = (bg[:, 0] * w + bg[:, 1]).tolist()
    keep = [i for i in bg_flat if i not in fg_flat]
    missing = len(bg_flat) - len(keep)
    if missing:
        pool = background_pool(attn_map, cfg.bg_top_frac)
        taken = fg_flat | set(keep)
        rest = np.array([i for i in pool.tolist() if i not in taken], dtype=np.int64)
        extra = rng.choice(rest, size=min(missing, len(rest)), replace=False) if len(rest) else []
        keep.extend(int(i) for i in extra)
    keep = np.asarray(keep, dtype=np.int64)
    bg = np.stack([keep // w, keep % w], axis=1).reshape(-1, 2)

    labels = np.full((h, w), IGNORE, dtype=np.int8)
    labels[bg[:, 0], bg[:, 1]] = BG
    labels[fg[:, 0], fg[:, 1]] = FG
    return PseudoLabelMap(labels, fg, bg)

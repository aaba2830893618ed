"""Turn attention maps into scored region proposals and pick one."""

from __future__ import annotations

import logging
import math
from fractions import Fraction
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from dips.errors import DegenerateInputError, InvalidInputError, InvalidParameterError

log = logging.getLogger(__name__)

OTSU_BINS = 256
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class HarvestConfig:
    min_region_size: int = 41
    top_p: int = 3
    min_score: float = 0.2
    blur_sigma: float = 5.0 * 64 / 224
    rng_seed: int = 0

    def __post_init__(self):
        if self.top_p < 1:
            raise InvalidParameterError("top_p must be >= 1")
        if self.min_region_size < 1:
            raise InvalidParameterError("min_region_size must be >= 1")
        if not 0.0 <= self.min_score <= 1.0:
            raise InvalidParameterError("min_score must lie in [0, 1]")
        if not self.blur_sigma > 0:
            raise InvalidParameterError("blur_sigma must be positive")

    @classmethod
    def for_image(cls, height, width, num_classes, min_region_size_frac=0.01, top_p=3,
                  min_score=None, blur_sigma=None, rng_seed=0):
        """Defaults scaled to the image size: 1% area, sigma 5 px at 224 px."""
        return cls(
            min_region_size=max(1, int(round(min_region_size_frac * height * width))),
            top_p=top_p,
            min_score=1.0 / num_classes if min_score is None else min_score,
            blur_sigma=5.0 * math.sqrt(height * width) / 224 if blur_sigma is None else blur_sigma,
            rng_seed=rng_seed,
        )


@dataclass
class Proposal:
    map_index: int
    bbox: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max (half-open)
    region_mask: np.ndarray
    area_px: int
    score: float = float("nan")
    is_fallback: bool = False


class Harvest(NamedTuple):
    selected: Proposal
    top_p: list


def _normalized_bins(amap):
    amap = np.asarray(amap, dtype=np.float64)
    if not np.all(np.isfinite(amap)):
        raise InvalidInputError("attention map must be finite")
    lo, hi = amap.min(), amap.max()
    if hi <= lo:
        raise DegenerateInputError("constant map has no threshold")
    norm = (amap - lo) / (hi - lo)
    return np.minimum((norm * OTSU_BINS).astype(np.int64), OTSU_BINS - 1), lo, hi


def _otsu_split(bins):
    """First and last split index of the leading run of maximal between-class variance.

    Bin centres are ``(2b + 1) / 512``; with counts ``w`` and centre sums
    ``S`` the between-class variance is proportional to
    ``(w0 * S1 - w1 * S0) ** 2 / (w0 * w1)``, compared exactly in integers so
    that genuine ties are never broken by rounding.
    """
    hist = np.bincount(bins.ravel(), minlength=OTSU_BINS).tolist()
    total_w = sum(hist)
    total_s = sum(c * (2 * b + 1) for b, c in enumerate(hist))
    best, ks = None, []
    w0 = s0 = 0
    for k in range(1, OTSU_BINS):
        w0 += hist[k - 1]
        s0 += hist[k - 1] * (2 * k - 1)
        w1, s1 = total_w - w0, total_s - s0
        if w0 == 0 or w1 == 0:
            continue
        score = Fraction((w0 * s1 - w1 * s0) ** 2, w0 * w1)
        if best is None or score > best:
            best, ks = score, [k]
        elif score == best:
            ks.append(k)
    if not best:
        raise DegenerateInputError("map occupies a single histogram bin")
    first = last = ks[0]
    for k in ks[1:]:
        if k != last + 1:
            break
        last = k
    return first, last


def otsu_threshold(amap):
    """Otsu threshold of ``amap`` in its own units.

    The map is min-max normalised and binned into 256 bins; the split that
    maximises between-class variance wins. When a run of consecutive splits
    ties (empty bins between two modes), the threshold sits mid-run. Pixels
    ``>= threshold`` are foreground, see :func:`otsu_binarize`.
    """
    bins, lo, hi = _normalized_bins(amap)
    first, last = _otsu_split(bins)
    return lo + (first + last) / 2 / OTSU_BINS * (hi - lo)


def otsu_binarize(amap):
    bins, _, _ = _normalized_bins(amap)
    first, _ = _otsu_split(bins)
    return bins >= first


def _bbox_from_slices(sl):
    ys, xs = sl
    return (xs.start, ys.start, xs.stop, ys.stop)


def connected_regions(binary, min_size):
    """8-connected components of ``binary`` with at least ``min_size`` pixels.

    Returns ``(region_mask, bbox, area)`` triples ordered by area descending,
    then ``y_min``, then ``x_min``, then the raster index of the component's
    first pixel. Boxes are half-open pixel boxes.
    """
    if min_size < 1:
        raise InvalidParameterError("min_size must be >= 1")
    binary = np.asarray(binary, dtype=bool)
    labels, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    # ndimage.label numbers components in raster order of their first pixel
    out = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if areas[lab] < min_size:
            continue
        mask = labels == lab
        out.append((lab, mask, _bbox_from_slices(sl), int(areas[lab])))
    out.sort(key=lambda r: (-r[3], r[2][1], r[2][0], r[0]))
    return [r[1:] for r in out]


def blur_outside_box(image, bbox, blur_sigma):
    """Gaussian-blur everything outside ``bbox``; the inside is copied verbatim."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    x0, y0, x1, y1 = bbox
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise InvalidInputError(f"bbox {bbox} outside image of size {(w, h)}")
    if (x0, y0, x1, y1) == (0, 0, w, h):
        return image.copy()
    radius = int(math.ceil(3 * blur_sigma))
    sigma = (blur_sigma, blur_sigma) + (0,) * (image.ndim - 2)
    rad = (radius, radius) + (0,) * (image.ndim - 2)
    out = ndimage.gaussian_filter(image.astype(np.float64), sigma=sigma, mode="reflect",
                                  radius=rad).astype(image.dtype)
    out[y0:y1, x0:x1] = image[y0:y1, x0:x1]
    return out


def box_area(bbox):
    x0, y0, x1, y1 = bbox
    return (x1 - x0) * (y1 - y0)


def harvest_proposals(image, stack, class_index, cfg, classifier, rng=None, stats=None):
    """Score every attention region with the frozen classifier and pick one.

    Each map is Otsu-binarised (a constant map counts as one whole-image
    region), split into 8-connected regions of at least ``min_region_size``
    pixels, and each region's box is scored by classifying the image with the
    outside of the box blurred. Survivors with ``score >= min_score`` are
    ranked, the best ``top_p`` kept, and one of them drawn uniformly.

    If nothing survives, the whole-image box is returned as the lone
    proposal with ``is_fallback=True``.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if stack.shape != (h, w):
        raise InvalidInputError(f"attention shape {stack.shape} != image shape {(h, w)}")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    stats = stats if stats is not None else Counter()

    candidates = []
    for m, amap in enumerate(stack.maps):
        try:
            binary = otsu_binarize(amap)
        except DegenerateInputError:
            stats["degenerate_maps"] += 1
            log.debug("constant attention map %d, using whole map", m)
            binary = np.ones((h, w), dtype=bool)
        for mask, bbox, area in connected_regions(binary, cfg.min_region_size):
            candidates.append(Proposal(m, bbox, mask, area))

    if candidates:
        blurred = [blur_outside_box(image, p.bbox, cfg.blur_sigma) for p in candidates]
        scores = classifier.classify_batch(blurred, class_index)
        for p, s in zip(candidates, scores):
            p.score = float(s)

    survivors = [p for p in candidates if p.score >= cfg.min_score]
    # stable sort keeps map order then region order among equal scores
    survivors.sort(key=lambda p: -p.score)
    top = survivors[: cfg.top_p]
    if not top:
        stats["fallbacks"] += 1
        full = np.ones((h, w), dtype=bool)
        score = classifier.classify(image, class_index)
        fb = Proposal(len(stack) - 1, (0, 0, w, h), full, h * w, score, is_fallback=True)
        return Harvest(fb, [fb])
    return Harvest(top[int(rng.integers(len(top)))], top)

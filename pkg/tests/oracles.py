"""Brute-force reference implementations used by the tests.

Everything here is written for clarity over speed: pixel loops, explicit
flood fill, exact fractions. None of it imports the code under test.
"""

from collections import deque
from fractions import Fraction
import math

import numpy as np


def box_pixels(box):
    x0, y0, x1, y1 = box
    return {(y, x) for y in range(y0, y1) for x in range(x0, x1)}


def iou(a, b):
    pa, pb = box_pixels(a), box_pixels(b)
    return len(pa & pb) / len(pa | pb)


def iop(pred, gt):
    pp, pg = box_pixels(pred), box_pixels(gt)
    return len(pp & pg) / len(pp)


def ioa(pred, gt):
    pp, pg = box_pixels(pred), box_pixels(gt)
    return len(pp & pg) / len(pg)


def flood_regions(binary, min_size=1):
    """8-connected components by breadth-first flood fill.

    Returns ``(mask, bbox, area)`` sorted by area desc, y_min, x_min, then the
    raster index of the first pixel met in a row-major scan.
    """
    binary = np.asarray(binary, dtype=bool)
    h, w = binary.shape
    seen = np.zeros_like(binary)
    found = []
    for y in range(h):
        for x in range(w):
            if not binary[y, x] or seen[y, x]:
                continue
            first = y * w + x
            pixels = []
            queue = deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                pixels.append((cy, cx))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            if len(pixels) < min_size:
                continue
            mask = np.zeros_like(binary)
            for py, px in pixels:
                mask[py, px] = True
            ys = [p[0] for p in pixels]
            xs = [p[1] for p in pixels]
            bbox = (min(xs), min(ys), max(xs) + 1, max(ys) + 1)
            found.append((len(pixels), bbox, first, mask))
    found.sort(key=lambda r: (-r[0], r[1][1], r[1][0], r[2]))
    return [(m, b, a) for a, b, _, m in found]


def otsu_threshold(amap, bins=256):
    """Exhaustive Otsu over ``bins`` equal-width bins in exact arithmetic.

    Each pixel is represented by the centre of its bin; every split between
    bins is tried and the between-class variance computed from the two pixel
    lists directly. Ties over a run of consecutive splits resolve mid-run.
    """
    a = np.asarray(amap, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    idx = []
    for v in a.ravel():
        b = int((v - lo) / (hi - lo) * bins)
        idx.append(min(b, bins - 1))
    centres = [Fraction(2 * b + 1, 2 * bins) for b in idx]
    n = len(centres)
    scores = {}
    for k in range(1, bins):
        c0 = [c for b, c in zip(idx, centres) if b < k]
        c1 = [c for b, c in zip(idx, centres) if b >= k]
        if not c0 or not c1:
            continue
        mu0 = sum(c0) / len(c0)
        mu1 = sum(c1) / len(c1)
        scores[k] = Fraction(len(c0), n) * Fraction(len(c1), n) * (mu0 - mu1) ** 2
    best = max(scores.values())
    run = sorted(k for k, s in scores.items() if s == best)
    first = last = run[0]
    for k in run[1:]:
        if k != last + 1:
            break
        last = k
    return lo + (first + last) / 2 / bins * (hi - lo)


def largest_box(pred_map, tau):
    regions = flood_regions(np.asarray(pred_map) >= tau)
    return regions[0][1] if regions else None


def max_box_acc(records, delta, thresholds):
    """records: list of (pred_map, gt_boxes); thresholds: iterable of floats."""
    best = 0.0
    for tau in thresholds:
        hits = 0
        for pred_map, gt_boxes in records:
            box = largest_box(pred_map, tau)
            if box is not None and max(iou(box, g) for g in gt_boxes) >= delta:
                hits += 1
        best = max(best, hits / len(records))
    return best


def pxap_steps(maps, masks):
    """Precision and recall at every distinct threshold, counted pixel by pixel."""
    scores = [float(v) for m in maps for v in np.asarray(m).ravel()]
    labels = [bool(v) for m in masks for v in np.asarray(m).ravel()]
    n_pos = sum(labels)
    steps = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        pp = sum(1 for s in scores if s >= t)
        steps.append((tp, pp))
    return steps, n_pos


def pxap_float(maps, masks):
    steps, n_pos = pxap_steps(maps, masks)
    terms, prev = [], 0.0
    for tp, pp in steps:
        recall = tp / n_pos
        terms.append(tp / pp * (recall - prev))
        prev = recall
    return math.fsum(terms)


def pxap_exact(maps, masks):
    steps, n_pos = pxap_steps(maps, masks)
    total, prev = Fraction(0), 0
    for tp, pp in steps:
        total += Fraction(tp, pp) * Fraction(tp - prev, n_pos)
        prev = tp
    return total


def crf_dense(image, probs, sigma_xy, sigma_rgb):
    """``sum_k sum_{p != q} M_k(p) a(p, q) (1 - M_k(q))`` by double loop.

    image: (3, H, W); probs: (K, H, W).
    """
    image = np.asarray(image, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    _, h, w = image.shape
    pix = [(y, x) for y in range(h) for x in range(w)]
    total = 0.0
    for p in pix:
        for q in pix:
            if p == q:
                continue
            d_xy = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2
            d_rgb = float(((image[:, p[0], p[1]] - image[:, q[0], q[1]]) ** 2).sum())
            a = math.exp(-d_xy / (2 * sigma_xy ** 2) - d_rgb / (2 * sigma_rgb ** 2))
            for k in range(probs.shape[0]):
                total += probs[k][p] * a * (1 - probs[k][q])
    return total


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad

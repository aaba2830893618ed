"""Training objective: partial cross-entropy, CRF regulariser, classifier alignment.

Tensors follow the torch layout: images ``(B, 3, H, W)``, localization maps
``(B, 2, H, W)`` with channel 0 the foreground ``M1`` and channel 1 the
background ``M2``, pseudo labels ``(B, H, W)`` holding 1 / 0 / -1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from dips.errors import InvalidParameterError, TrainingAbortedError, UndefinedLossError
from dips.sampling import BG, FG, IGNORE

PROB_CLAMP = 1e-7
TERMS = ("cls", "cpa", "crf")


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_cpa: float = 1.0
    lambda_crf: float = 2e-9

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_cpa, self.lambda_crf) < 0:
            raise InvalidParameterError("loss weights must be non-negative")

    def as_dict(self):
        return {"cls": self.lambda_cls, "cpa": self.lambda_cpa, "crf": self.lambda_crf}

    def restricted(self, losses):
        """Zero every weight whose term is not in ``losses`` (e.g. ``{"cpa", "crf"}``)."""
        unknown = set(losses) - set(TERMS)
        if unknown:
            raise InvalidParameterError(f"unknown loss terms: {sorted(unknown)}")
        w = self.as_dict()
        return LossWeights(*(w[t] if t in losses else 0.0 for t in TERMS))


@dataclass(frozen=True)
class AffinityParams:
    sigma_xy: float = 15.0
    sigma_rgb: float = 0.1

    def __post_init__(self):
        if not (self.sigma_xy > 0 and self.sigma_rgb > 0):
            raise InvalidParameterError("affinity bandwidths must be positive")


def parse_loss_set(text):
    """``"cpa+crf"`` -> ``frozenset({"cpa", "crf"})``; ``"full"`` means all three."""
    if text in ("full", "all", ""):
        return frozenset(TERMS)
    parts = frozenset(p.strip().lower() for p in text.split("+"))
    unknown = parts - set(TERMS)
    if unknown:
        raise InvalidParameterError(f"unknown loss terms: {sorted(unknown)}")
    return parts


def loss_set_tag(losses):
    return "+".join(t for t in ("cpa", "crf", "cls") if t in losses)


# --------------------------------------------------------------------------
# partial cross-entropy


def partial_cross_entropy(probs, labels):
    """Mean of ``-log M_label(r)`` over labeled pixels ``r``."""
    labels = torch.as_tensor(labels)
    if probs.dim() == 3:
        probs, labels = probs[None], labels[None]
    labeled = labels != IGNORE
    n = int(labeled.sum())
    if n == 0:
        raise UndefinedLossError("no labeled pixels")
    p = torch.where(labels == FG, probs[:, 0], probs[:, 1])
    nll = -torch.log(p.clamp_min(PROB_CLAMP))
    return nll[labeled].sum() / n


def partial_cross_entropy_grad(M, labels):
    """Closed-form gradient of :func:`partial_cross_entropy` w.r.t. ``M`` (2, H, W)."""
    M = np.asarray(M, dtype=np.float64)
    labels = np.asarray(labels)
    n = int((labels != IGNORE).sum())
    g = np.zeros_like(M)
    fg, bg = labels == FG, labels == BG
    g[0][fg] = -1.0 / (n * M[0][fg])
    g[1][bg] = -1.0 / (n * M[1][bg])
    return g


# --------------------------------------------------------------------------
# CRF loss


def _pixel_positions(h, w, dtype, device=None):
    yy, xx = torch.meshgrid(torch.arange(h, dtype=dtype, device=device),
                            torch.arange(w, dtype=dtype, device=device), indexing="ij")
    return torch.stack([yy.reshape(-1), xx.reshape(-1)], dim=1)


def _sq_dists(a):
    # a: (B, n, c) -> (B, n, n)
    sq = (a * a).sum(-1)
    return (sq[:, :, None] + sq[:, None, :] - 2 * a @ a.transpose(1, 2)).clamp_min(0)


def affinity_matrix(image, params):
    """Dense Gaussian affinities ``(B, n, n)`` with a zero diagonal.

    ``a(p, q) = exp(-|pos_p - pos_q|^2 / 2 sxy^2 - |rgb_p - rgb_q|^2 / 2 srgb^2)``
    """
    if image.dim() == 3:
        image = image[None]
    b, c, h, w = image.shape
    rgb = image.reshape(b, c, h * w).transpose(1, 2)
    pos = _pixel_positions(h, w, image.dtype, image.device)[None]
    d = _sq_dists(pos) / (2 * params.sigma_xy ** 2) + _sq_dists(rgb) / (2 * params.sigma_rgb ** 2)
    a = torch.exp(-d)
    eye = torch.eye(h * w, dtype=torch.bool, device=image.device)
    return a.masked_fill(eye, 0.0)


def crf_loss_dense(image, probs, params):
    """``sum_i M_i^T A (1 - M_i)`` per image, averaged over the batch."""
    if image.dim() == 3:
        image, probs = image[None], probs[None]
    b, k, h, w = probs.shape
    a = affinity_matrix(image, params)
    m = probs.reshape(b, k, h * w)
    am = (1 - m) @ a  # A symmetric
    return (m * am).sum(dim=(1, 2)).mean()


def crf_loss(image, probs, params, dense_max_pixels=32 * 32, factor=4):
    """CRF regulariser, dense when small, on a downsampled pair otherwise.

    The downsampled path average-pools image and map by ``factor``, shrinks
    ``sigma_xy`` accordingly and rescales by ``factor ** 4`` (each coarse pair
    stands for ``factor ** 4`` fine pairs), so both paths agree in scale.
    Pairs inside one pooled block are added with affinity 1, as
    ``factor**2 * (factor**2 - 1) * M (1 - M)`` per block.
    """
    h, w = probs.shape[-2:]
    if h * w <= dense_max_pixels:
        return crf_loss_dense(image, probs, params)
    squeeze = image.dim() == 3
    if squeeze:
        image, probs = image[None], probs[None]
    if h % factor or w % factor:
        raise InvalidParameterError(f"map size {(h, w)} not divisible by {factor}")
    small = AffinityParams(params.sigma_xy / factor, params.sigma_rgb)
    img = F.avg_pool2d(image, factor)
    m = F.avg_pool2d(probs, factor)
    f2 = factor ** 2
    inside = (m * (1 - m)).sum(dim=(1, 2, 3)).mean() * f2 * (f2 - 1)
    return crf_loss_dense(img, m, small) * factor ** 4 + inside


def crf_loss_grad(image, M, params):
    """Closed-form gradient of the dense CRF loss w.r.t. ``M`` (K, H, W): ``A (1 - 2 M_i)``."""
    img = torch.as_tensor(np.asarray(image), dtype=torch.float64)
    a = affinity_matrix(img, params)[0].numpy()
    M = np.asarray(M, dtype=np.float64)
    k, h, w = M.shape
    flat = M.reshape(k, h * w)
    return ((1 - 2 * flat) @ a).reshape(k, h, w)


# --------------------------------------------------------------------------
# classifier alignment


def classifier_alignment_loss(image, fg_map, class_index, classifier):
    """Cross-entropy of the frozen classifier on the foreground-masked image.

    Masking happens in the classifier's centred input space: a pixel with map
    value 0 becomes the classifier's input mean, not black.
    """
    if image.dim() == 3:
        image, fg_map = image[None], fg_map[None]
    target = torch.as_tensor(class_index, dtype=torch.long).reshape(-1)
    fill = classifier.fill_tensor(image)
    logits = classifier(fill + fg_map[:, None] * (image - fill))
    return F.cross_entropy(logits / classifier.temperature, target)


# --------------------------------------------------------------------------


def total_loss(terms, weights):
    """Weighted sum of the terms present in ``terms``.

    Returns ``(total, parts)`` where ``parts`` maps each term to its float
    value. A non-finite term aborts with :class:`TrainingAbortedError`.
    """
    w = weights.as_dict()
    parts = {}
    total = None
    for name in TERMS:
        if name not in terms:
            continue
        value = terms[name]
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise TrainingAbortedError(name)
        parts[name] = v
        contrib = w[name] * value
        total = contrib if total is None else total + contrib
    if total is None:
        raise UndefinedLossError("no loss terms given")
    return total, parts

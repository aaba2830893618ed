"""WSOL evaluation: PxAP, (New)MaxBoxAcc, Top-k Loc, error dissection, threshold sweeps.

Boxes are half-open pixel boxes ``(x0, y0, x1, y1)``: a box covers columns
``x0 .. x1 - 1`` and rows ``y0 .. y1 - 1``, so its area is
``(x1 - x0) * (y1 - y0)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from dips.errors import InvalidInputError
from dips.harvest import connected_regions

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
DEFAULT_THRESHOLDS = np.arange(100) / 100.0


@dataclass
class EvalRecord:
    image_id: str
    gt_boxes: list
    pred_map: np.ndarray
    gt_mask: np.ndarray | None = None
    class_scores: np.ndarray | None = None
    true_class: int | None = None

    def __post_init__(self):
        if not self.gt_boxes and self.gt_mask is None:
            raise InvalidInputError(f"{self.image_id}: needs gt boxes or a gt mask")
        pm = np.asarray(self.pred_map, dtype=np.float64)
        if pm.ndim != 2 or pm.size == 0 or pm.min() < 0 or pm.max() > 1:
            raise InvalidInputError(f"{self.image_id}: pred_map must be a 2-D map in [0, 1]")
        self.pred_map = pm
        self.gt_boxes = [tuple(int(v) for v in b) for b in self.gt_boxes]
        if not self.gt_boxes:
            self.gt_boxes = [b for _, b, _ in connected_regions(self.gt_mask, 1)[:1]]


@dataclass
class ThresholdSweep:
    metric: str
    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diff(self.thresholds) <= 0):
            raise InvalidInputError("thresholds must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("sweep values must be finite")

    @property
    def peak(self):
        return float(self.values.max())

    def value_at(self, tau):
        i = int(np.argmin(np.abs(self.thresholds - tau)))
        return float(self.values[i])

    def flatness(self, tau=0.7):
        """Value at ``tau`` relative to the peak over all thresholds."""
        peak = self.peak
        return self.value_at(tau) / peak if peak > 0 else 0.0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", self.metric])
            for t, v in zip(self.thresholds, self.values):
                writer.writerow([f"{t:.6g}", repr(float(v))])


# --------------------------------------------------------------------------
# box overlaps


def _check_box(b):
    x0, y0, x1, y1 = b
    if x1 <= x0 or y1 <= y0:
        raise InvalidInputError(f"box {b} has zero area")
    return (x1 - x0) * (y1 - y0)


def _intersection(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0) * max(h, 0)


def iou(box_a, box_b):
    area_a, area_b = _check_box(box_a), _check_box(box_b)
    inter = _intersection(box_a, box_b)
    return inter / (area_a + area_b - inter)


def iop(pred, gt):
    """Intersection over the predicted box."""
    _check_box(gt)
    return _intersection(pred, gt) / _check_box(pred)


def ioa(pred, gt):
    """Intersection over the annotated box."""
    _check_box(pred)
    return _intersection(pred, gt) / _check_box(gt)


def iog(pred, gt):
    """Intersection over a ground-truth box; same ratio as :func:`ioa`, used for multi-instance checks."""
    return ioa(pred, gt)


# --------------------------------------------------------------------------
# maps to boxes


def map_to_boxes(pred_map, tau, multi=False):
    """Tight box of the largest 8-connected component of ``pred_map >= tau``.

    With ``multi=True`` every component's box is returned (largest first).
    """
    if not 0.0 <= tau <= 1.0:
        raise InvalidInputError(f"threshold {tau} outside [0, 1]")
    regions = connected_regions(np.asarray(pred_map) >= tau, 1)
    boxes = [bbox for _, bbox, _ in regions]
    return boxes if multi else boxes[:1]


def _threshold_grid(records, thresholds, exact):
    grid = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if exact:
        values = np.unique(np.concatenate([r.pred_map.ravel() for r in records]))
        grid = np.union1d(grid, values)
    return np.asarray(grid, dtype=np.float64)


def _best_ious(record, grid):
    """Best IoU against any GT box of the predicted box at each threshold."""
    out = np.zeros(len(grid))
    for i, tau in enumerate(grid):
        boxes = map_to_boxes(record.pred_map, float(tau))
        if boxes:
            out[i] = max(iou(boxes[0], g) for g in record.gt_boxes)
    return out


def box_accuracy_curve(records, deltas=IOU_THRESHOLDS, thresholds=None, exact=False):
    """``(grid, acc)`` with ``acc[t, d]`` the fraction of records hitting IoU >= delta_d at threshold t."""
    if not records:
        raise InvalidInputError("no records")
    grid = _threshold_grid(records, thresholds, exact)
    ious = np.stack([_best_ious(r, grid) for r in records])
    acc = np.stack([(ious >= d).mean(axis=0) for d in deltas], axis=1)
    return grid, acc


def max_box_acc(records, delta=0.5, thresholds=None, exact=False):
    _, acc = box_accuracy_curve(records, (delta,), thresholds, exact)
    return float(acc[:, 0].max())


def new_max_box_acc(records, deltas=IOU_THRESHOLDS, thresholds=None, exact=False):
    """MaxBoxAcc averaged over the IoU thresholds ``deltas``."""
    _, acc = box_accuracy_curve(records, deltas, thresholds, exact)
    return float(np.mean(acc.max(axis=0)))


# --------------------------------------------------------------------------
# pixel AP


def pxap(records):
    """Area under the pooled pixel precision-recall curve.

    Every distinct map value is a threshold (``>=`` is positive). Summation is
    the step rule ``sum_k P_k (R_k - R_{k-1})`` over thresholds in descending
    order, which makes the score a pure rank statistic.
    """
    if not records:
        raise InvalidInputError("no records")
    if any(r.gt_mask is None for r in records):
        raise InvalidInputError("PxAP needs a gt_mask on every record")
    scores = np.concatenate([r.pred_map.ravel() for r in records])
    labels = np.concatenate([np.asarray(r.gt_mask, dtype=bool).ravel() for r in records])
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise InvalidInputError("no foreground pixels in the ground truth")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    pp = ends + 1
    precision = tp / pp
    recall = tp / n_pos
    gain = np.diff(np.r_[0.0, recall])
    return math.fsum((precision * gain).tolist())


# --------------------------------------------------------------------------
# localization accuracy and error dissection


def best_threshold(records, delta=0.5, thresholds=None):
    grid, acc = box_accuracy_curve(records, (delta,), thresholds)
    return float(grid[int(np.argmax(acc[:, 0]))])


def topk_loc_acc(records, k, thresholds=None):
    """Fraction with the true class in the top-``k`` scores and box IoU >= 0.5.

    Boxes come from the threshold that maximises MaxBoxAcc at IoU 0.5.
    """
    tau = best_threshold(records, 0.5, thresholds)
    hits = 0
    for r in records:
        if r.class_scores is None or r.true_class is None:
            raise InvalidInputError(f"{r.image_id}: class scores and true class required")
        scores = np.asarray(r.class_scores)
        top = np.argsort(-scores, kind="stable")[:k]
        boxes = map_to_boxes(r.pred_map, tau)
        loc = bool(boxes) and max(iou(boxes[0], g) for g in r.gt_boxes) >= 0.5
        hits += loc and int(r.true_class) in top
    return hits / len(records)


def error_dissection(records, thresholds=None):
    """Rates of part (LPE), more (LME) and multi-instance (MIE) errors.

    Only records localized wrongly (IoU < 0.5 at the MaxBoxAcc(0.5) threshold)
    are classified, one label each, checked in the order MIE, LPE, LME:

    * MIE: at least two GT boxes each have IoG > 0.3 with the predicted box;
    * LPE: IoP > 0.5 against the best-matching GT box (box too small);
    * LME: IoA > 0.7 against that box (box too large).

    Rates are counts over all records.
    """
    tau = best_threshold(records, 0.5, thresholds)
    counts = {"LPE": 0, "LME": 0, "MIE": 0}
    for r in records:
        boxes = map_to_boxes(r.pred_map, tau)
        if not boxes:
            continue
        pred = boxes[0]
        ious = [iou(pred, g) for g in r.gt_boxes]
        if max(ious) >= 0.5:
            continue
        gt = r.gt_boxes[int(np.argmax(ious))]
        if sum(iog(pred, g) > 0.3 for g in r.gt_boxes) >= 2:
            counts["MIE"] += 1
        elif iop(pred, gt) > 0.5:
            counts["LPE"] += 1
        elif ioa(pred, gt) > 0.7:
            counts["LME"] += 1
    return {k: v / len(records) for k, v in counts.items()}


# --------------------------------------------------------------------------
# threshold sweeps


def _pixel_stat(records, tau, stat):
    tp = fp = fn = 0
    for r in records:
        pred = r.pred_map >= tau
        gt = np.asarray(r.gt_mask, dtype=bool)
        tp += int((pred & gt).sum())
        fp += int((pred & ~gt).sum())
        fn += int((~pred & gt).sum())
    if stat == "pixel_precision":
        return tp / (tp + fp) if tp + fp else 1.0
    if stat == "pixel_recall":
        return tp / (tp + fn) if tp + fn else 0.0
    return tp / (tp + fp + fn) if tp + fp + fn else 0.0


SWEEP_METRICS = ("boxacc", "box_area", "pixel_precision", "pixel_recall", "pixel_iou")


def threshold_sweep(records, metric="boxacc", delta=0.5, thresholds=None):
    """Evaluate ``metric`` at every map threshold of the 100-point grid.

    ``boxacc`` is BoxAcc at IoU ``delta``; ``box_area`` the mean area fraction
    of the predicted box; the ``pixel_*`` metrics pool pixels over records.
    """
    if metric not in SWEEP_METRICS:
        raise InvalidInputError(f"unknown sweep metric {metric!r}; choose from {SWEEP_METRICS}")
    grid = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if metric == "boxacc":
        _, acc = box_accuracy_curve(records, (delta,), grid)
        values = acc[:, 0]
    elif metric == "box_area":
        values = []
        for tau in grid:
            fracs = []
            for r in records:
                boxes = map_to_boxes(r.pred_map, float(tau))
                fracs.append((boxes and _check_box(boxes[0]) / r.pred_map.size) or 0.0)
            values.append(float(np.mean(fracs)))
    else:
        values = [_pixel_stat(records, float(tau), metric) for tau in grid]
    return ThresholdSweep(metric, grid, np.asarray(values, dtype=np.float64))


def evaluate_records(records, with_classes=True):
    """All summary metrics as an ordered dict of floats."""
    grid, acc = box_accuracy_curve(records, IOU_THRESHOLDS)
    out = {}
    for d, col in zip(IOU_THRESHOLDS, acc.T):
        out[f"maxboxacc@{d:g}"] = float(col.max())
    out["new_maxboxacc"] = float(np.mean(acc.max(axis=0)))
    if all(r.gt_mask is not None for r in records):
        out["pxap"] = pxap(records)
    if with_classes and all(r.class_scores is not None for r in records):
        out["top1_loc"] = topk_loc_acc(records, 1)
        out["top5_loc"] = topk_loc_acc(records, 5)
    out.update(error_dissection(records))
    return out

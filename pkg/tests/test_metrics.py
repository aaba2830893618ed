import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from dips import metrics
from dips.errors import InvalidInputError
from dips.metrics import EvalRecord


def random_box(rng, h, w):
    x0 = int(rng.integers(0, w))
    y0 = int(rng.integers(0, h))
    return (x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1)))


def random_map(rng, h, w):
    if rng.random() < 0.5:
        return rng.integers(0, 5, size=(h, w)) / 4.0  # many ties
    return rng.random((h, w))


def random_records(rng, n=None):
    n = n or int(rng.integers(1, 6))
    h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    records = []
    for i in range(n):
        mask = rng.random((h, w)) < 0.4
        if not mask.any():
            mask[rng.integers(h), rng.integers(w)] = True
        boxes = [random_box(rng, h, w) for _ in range(int(rng.integers(1, 3)))]
        records.append(EvalRecord(f"r{i}", boxes, random_map(rng, h, w), mask))
    return records


box_st = st.tuples(st.integers(0, 7), st.integers(0, 7), st.integers(1, 8), st.integers(1, 8)).filter(
    lambda b: b[2] > b[0] and b[3] > b[1])


@given(box_st, box_st)
def test_overlaps_match_pixel_counts(a, b):
    assert metrics.iou(a, b) == oracles.iou(a, b)
    assert metrics.iop(a, b) == oracles.iop(a, b)
    assert metrics.ioa(a, b) == oracles.ioa(a, b)
    assert metrics.iog(a, b) == oracles.ioa(a, b)


@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    assert metrics.iou(a, b) == metrics.iou(b, a)
    assert 0.0 <= metrics.iou(a, b) <= 1.0
    assert metrics.iou(a, a) == 1.0


def test_iou_hand_values():
    assert metrics.iou((0, 0, 2, 2), (1, 1, 3, 3)) == 1 / 7
    assert metrics.iou((0, 0, 2, 2), (2, 2, 4, 4)) == 0.0
    assert metrics.iop((1, 1, 2, 2), (0, 0, 4, 4)) == 1.0
    assert metrics.ioa((0, 0, 4, 4), (1, 1, 2, 2)) == 1.0


def test_zero_area_box_rejected():
    with pytest.raises(InvalidInputError):
        metrics.iou((0, 0, 0, 3), (0, 0, 2, 2))


@pytest.mark.parametrize("seed", range(30))
def test_max_box_acc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    records = random_records(rng)
    pairs = [(r.pred_map, r.gt_boxes) for r in records]
    grid = sorted(set(metrics.DEFAULT_THRESHOLDS.tolist())
                  | {float(v) for r in records for v in r.pred_map.ravel()})
    for delta in (0.3, 0.5, 0.7):
        assert metrics.max_box_acc(records, delta, exact=True) == oracles.max_box_acc(pairs, delta, grid)
        assert metrics.max_box_acc(records, delta) == oracles.max_box_acc(
            pairs, delta, metrics.DEFAULT_THRESHOLDS.tolist())


@pytest.mark.parametrize("seed", range(30))
def test_pxap_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    records = random_records(rng)
    maps = [r.pred_map for r in records]
    masks = [r.gt_mask for r in records]
    got = metrics.pxap(records)
    assert got == oracles.pxap_float(maps, masks)
    assert math.isclose(got, float(oracles.pxap_exact(maps, masks)), rel_tol=1e-12)


def test_pxap_perfect_and_constant_maps():
    mask = np.zeros((6, 6), bool)
    mask[1:4, 2:5] = True
    perfect = EvalRecord("a", [(2, 1, 5, 4)], mask.astype(float), mask)
    assert metrics.pxap([perfect]) == 1.0
    flat = EvalRecord("b", [(2, 1, 5, 4)], np.full((6, 6), 0.3), mask)
    # a constant map is one threshold: precision = base rate at full recall
    assert metrics.pxap([flat]) == mask.mean()


def test_pxap_is_rank_invariant():
    rng = np.random.default_rng(3)
    records = random_records(rng, 4)
    warped = [EvalRecord(r.image_id, r.gt_boxes, r.pred_map ** 3, r.gt_mask) for r in records]
    assert metrics.pxap(records) == metrics.pxap(warped)


def test_pxap_needs_masks():
    with pytest.raises(InvalidInputError):
        metrics.pxap([EvalRecord("a", [(0, 0, 2, 2)], np.zeros((4, 4)))])


def test_new_max_box_acc_is_mean_over_deltas():
    rng = np.random.default_rng(5)
    records = random_records(rng, 5)
    expect = np.mean([metrics.max_box_acc(records, d) for d in (0.3, 0.5, 0.7)])
    assert metrics.new_max_box_acc(records) == pytest.approx(expect, abs=1e-15)


def test_gt_masks_as_predictions_score_one():
    rng = np.random.default_rng(9)
    records = []
    for i in range(4):
        mask = np.zeros((16, 16), bool)
        x0, y0 = rng.integers(0, 8, size=2)
        mask[y0:y0 + 6, x0:x0 + 5] = True
        box = (int(x0), int(y0), int(x0) + 5, int(y0) + 6)
        records.append(EvalRecord(str(i), [box], mask.astype(float), mask, np.eye(5)[i % 5], i % 5))
    out = metrics.evaluate_records(records)
    assert out["new_maxboxacc"] == 1.0
    assert out["pxap"] == 1.0
    assert out["top1_loc"] == 1.0
    assert out["LPE"] == out["LME"] == out["MIE"] == 0.0


def test_topk_loc_requires_class_hit():
    mask = np.zeros((8, 8), bool)
    mask[2:6, 2:6] = True
    scores = np.array([0.1, 0.6, 0.3])
    rec = EvalRecord("a", [(2, 2, 6, 6)], mask.astype(float), mask, scores, 2)
    assert metrics.topk_loc_acc([rec], 1) == 0.0
    assert metrics.topk_loc_acc([rec], 2) == 1.0


def _record_with_pred_box(pred, gts, size=20):
    m = np.zeros((size, size))
    x0, y0, x1, y1 = pred
    m[y0:y1, x0:x1] = 1.0
    return EvalRecord("e", gts, m)


def test_error_dissection_categories():
    part = _record_with_pred_box((4, 4, 7, 7), [(2, 2, 14, 14)])  # small box inside the object
    more = _record_with_pred_box((0, 0, 20, 20), [(6, 6, 10, 10)])  # covers far more than the object
    multi = _record_with_pred_box((1, 1, 19, 10), [(1, 1, 8, 10), (11, 1, 19, 10)])
    good = _record_with_pred_box((2, 2, 10, 10), [(2, 2, 10, 10)])
    assert metrics.error_dissection([part], [0.5]) == {"LPE": 1.0, "LME": 0.0, "MIE": 0.0}
    assert metrics.error_dissection([more], [0.5]) == {"LPE": 0.0, "LME": 1.0, "MIE": 0.0}
    assert metrics.error_dissection([multi], [0.5]) == {"LPE": 0.0, "LME": 0.0, "MIE": 1.0}
    assert metrics.error_dissection([good], [0.5]) == {"LPE": 0.0, "LME": 0.0, "MIE": 0.0}


def test_map_to_boxes_largest_component():
    m = np.zeros((10, 10))
    m[0:2, 0:2] = 0.9
    m[5:9, 4:9] = 0.8
    assert metrics.map_to_boxes(m, 0.5) == [(4, 5, 9, 9)]
    assert metrics.map_to_boxes(m, 0.85) == [(0, 0, 2, 2)]
    assert metrics.map_to_boxes(m, 0.95) == []
    assert metrics.map_to_boxes(m, 0.5, multi=True) == [(4, 5, 9, 9), (0, 0, 2, 2)]


def test_sweep_flatness_and_csv(tmp_path):
    rng = np.random.default_rng(1)
    records = random_records(rng, 3)
    sweep = metrics.threshold_sweep(records, "boxacc")
    assert len(sweep.values) == 100
    assert sweep.value_at(0.7) == sweep.values[70]
    assert 0 <= sweep.flatness(0.7) <= 1
    sweep.to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "threshold,boxacc"
    for name in metrics.SWEEP_METRICS:
        assert np.all(np.isfinite(metrics.threshold_sweep(records, name).values))
    with pytest.raises(InvalidInputError):
        metrics.threshold_sweep(records, "nonsense")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_boxacc_curve_is_monotone_in_delta(seed):
    records = random_records(np.random.default_rng(seed))
    _, acc = metrics.box_accuracy_curve(records, (0.3, 0.5, 0.7))
    assert np.all(acc[:, 0] >= acc[:, 1]) and np.all(acc[:, 1] >= acc[:, 2])


def test_record_validation():
    with pytest.raises(InvalidInputError):
        EvalRecord("a", [(0, 0, 1, 1)], np.full((3, 3), 1.5))
    with pytest.raises(InvalidInputError):
        EvalRecord("a", [], np.zeros((3, 3)))
    mask = np.zeros((5, 5), bool)
    mask[1:3, 2:4] = True
    assert EvalRecord("a", [], np.zeros((5, 5)), mask).gt_boxes == [(2, 1, 4, 3)]


def test_pxap_inverted_mask_gives_base_rate():
    rng = np.random.default_rng(4)
    mask = rng.random((4, 4)) < 0.3
    rec = EvalRecord("a", [], 1.0 - mask, mask)
    assert metrics.pxap([rec]) == mask.mean()

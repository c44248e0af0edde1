import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from olaf.data import PartTaxonomy
from olaf.metrics import (
    ConfusionMatrix,
    Evaluator,
    ImageRecord,
    mavg,
    miou,
    miou_small,
    sqiou,
    write_report_json,
)
from oracles import flood_components, set_iou, set_miou


def two_object_tax():
    return PartTaxonomy("t", ["a", "b"], [
        {"name": "a1", "object": "a", "id": 1},
        {"name": "b1", "object": "b", "id": 2},
        {"name": "b2", "object": "b", "id": 3},
    ])


def random_pair(rng, k, shape=(8, 8)):
    return rng.integers(0, k, shape), rng.integers(0, k, shape)


def test_perfect_prediction_diagonal():
    gt = np.arange(16).reshape(4, 4) % 3
    cm = ConfusionMatrix(3).accumulate(gt, gt)
    assert np.trace(cm.counts) == 16 and cm.total == 16
    per_class, mean = miou(cm)
    assert np.allclose(per_class, 1.0) and mean == 1.0


def test_empty_accumulation():
    cm = ConfusionMatrix(4)
    assert (cm.counts == 0).all()
    with pytest.warns(RuntimeWarning):
        _, mean = miou(cm)
    assert math.isnan(mean)


def test_disjoint_prediction():
    gt = np.ones((4, 4), int)
    pred = np.full((4, 4), 2)
    per_class, _ = miou(ConfusionMatrix(3).accumulate(pred, gt))
    assert per_class[1] == 0.0 and per_class[2] == 0.0
    assert math.isnan(per_class[0])


def test_worked_4x4_example():
    gt = np.ones((4, 4), int)
    gt[3, :] = 2  # 12 px of class 1, 4 px of class 2
    pred = np.ones((4, 4), int)
    pred[2, :] = 2  # 4 of the class-1 pixels predicted as 2
    pred[3, :] = 2
    per_class, _ = miou(ConfusionMatrix(3).accumulate(pred, gt))
    assert per_class[1] == pytest.approx(8 / 12, abs=1e-12)
    assert per_class[2] == pytest.approx(4 / 8, abs=1e-12)
    assert per_class[1] == pytest.approx(set_iou(pred, gt, 1), abs=1e-12)
    assert per_class[2] == pytest.approx(set_iou(pred, gt, 2), abs=1e-12)


def test_out_of_range_label():
    with pytest.raises(ValueError, match="7"):
        ConfusionMatrix(3).accumulate(np.array([[7]]), np.array([[0]]))


def test_oracle_equivalence_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(2, 6))
        pred, gt = random_pair(rng, k)
        per_class, mean = miou(ConfusionMatrix(k).accumulate(pred, gt))
        ref, ref_mean = set_miou([(pred, gt)], k)
        for c in range(k):
            if ref[c] is None:
                assert math.isnan(per_class[c])
            else:
                assert abs(per_class[c] - ref[c]) < 1e-12
        assert abs(mean - ref_mean) < 1e-12


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_merge_equals_single_pass(seed, n_shards):
    rng = np.random.default_rng(seed)
    pairs = [random_pair(rng, 4) for _ in range(n_shards * 2)]
    whole = ConfusionMatrix(4)
    for p, g in pairs:
        whole.accumulate(p, g)
    shards = []
    for i in range(n_shards):
        cm = ConfusionMatrix(4)
        for p, g in pairs[i::n_shards]:
            cm.accumulate(p, g)
        shards.append(cm)
    merged = shards[0]
    for s in shards[1:]:
        merged = merged + s
    np.testing.assert_array_equal(merged.counts, whole.counts)
    a, b = shards[0], shards[-1]
    np.testing.assert_array_equal((a + b).counts, (b + a).counts)


def test_mavg_examples():
    tax = two_object_tax()
    per_object, overall = mavg(np.array([0.9, 1.0, 0.0, 0.5]), tax)
    assert per_object == {"a": 1.0, "b": 0.25}
    assert overall == pytest.approx(0.625)

    single = PartTaxonomy("s", ["o"], [{"name": f"p{i}", "object": "o", "id": i} for i in (1, 2, 3)])
    iou = np.array([0.3, 0.2, 0.4, 0.9])
    assert mavg(iou, single)[1] == pytest.approx(iou[1:].mean())

    per_object, overall = mavg(np.array([1.0, np.nan, 0.2, 0.4]), tax)
    assert math.isnan(per_object["a"])
    assert overall == pytest.approx(0.3)


def test_sqiou_single_image_is_plain_iou():
    rng = np.random.default_rng(1)
    pred, gt = random_pair(rng, 4, (16, 16))
    rec = ImageRecord.from_pair(pred, gt, 4)
    per_class, _ = sqiou([rec])
    for c in range(4):
        if rec.areas[c]:
            assert per_class[c] == pytest.approx(rec.ious[c])


def test_sqiou_two_images_hand_computed():
    recs = [ImageRecord(np.array([0, 100]), np.array([np.nan, 1.0])),
            ImageRecord(np.array([0, 400]), np.array([np.nan, 0.0]))]
    per_class, _ = sqiou(recs)
    assert per_class[1] == pytest.approx(1 / 3)
    assert math.isnan(per_class[0])


@given(st.lists(st.integers(1, 5000), min_size=1, max_size=8), st.floats(0, 1))
def test_sqiou_constant_iou(areas, v):
    recs = [ImageRecord(np.array([0, a]), np.array([np.nan, v])) for a in areas]
    assert sqiou(recs)[0][1] == pytest.approx(v)


def test_sqavg_groups_by_object():
    recs = [ImageRecord(np.array([10, 4, 9, 16]), np.array([1.0, 1.0, 0.0, 0.5]))]
    _, _, per_object, sqavg = sqiou(recs, two_object_tax())
    assert per_object == {"a": 1.0, "b": 0.25}
    assert sqavg == pytest.approx(0.625)


# -- small parts -------------------------------------------------------------------

def test_small_undefined_when_all_large():
    gt = np.zeros((30, 30), int)
    gt[:, :26] = 1  # 780 px >= 625
    res = miou_small([gt], [gt], two_object_tax())
    assert not res.defined and math.isnan(res.mean)


def test_small_exact_3x3():
    gt = np.zeros((16, 16), int)
    gt[5:8, 5:8] = 2
    res = miou_small([gt.copy()], [gt], two_object_tax())
    assert res.per_class[2] == 1.0
    assert res.per_object["b"] == 1.0


def _restricted_oracle(pred, gt, cls, threshold=625, dilate=2):
    h, w = gt.shape
    region = set()
    for comp in flood_components(gt == cls):
        if len(comp) >= threshold:
            continue
        ys = [p[0] for p in comp]
        xs = [p[1] for p in comp]
        for y in range(max(min(ys) - dilate, 0), min(max(ys) + dilate + 1, h)):
            for x in range(max(min(xs) - dilate, 0), min(max(xs) + dilate + 1, w)):
                region.add((y, x))
    p = {q for q in region if pred[q] == cls}
    g = {q for q in region if gt[q] == cls}
    return len(p & g) / len(p | g)


def test_small_half_covered_against_brute_force():
    gt = np.zeros((16, 16), int)
    gt[6:9, 6:9] = 1
    pred = np.zeros((16, 16), int)
    pred[6:9, 6:8] = 1  # covers 6 of 9 GT pixels
    pred[5, 5:10] = 1  # over-prediction inside the dilated box
    pred[0, 0] = 1  # far away, outside the box
    res = miou_small([pred], [gt], two_object_tax())
    expected = _restricted_oracle(pred, gt, 1)
    assert res.per_class[1] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(6 / 14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_small_matches_brute_force_random(seed):
    rng = np.random.default_rng(seed)
    gt = (rng.random((16, 16)) > 0.8).astype(int) * rng.integers(1, 4, (16, 16))
    pred = (rng.random((16, 16)) > 0.8).astype(int) * rng.integers(1, 4, (16, 16))
    res = miou_small([pred], [gt], two_object_tax())
    for c in (1, 2, 3):
        if (gt == c).any():
            assert res.per_class[c] == pytest.approx(_restricted_oracle(pred, gt, c), abs=1e-12)
        else:
            assert math.isnan(res.per_class[c])


# -- family-wide properties ------------------------------------------------------------

def _all_metrics(preds, gts, tax):
    ev = Evaluator(tax)
    for p, g in zip(preds, gts):
        ev.add(p, g)
    return ev.report()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_bounds_and_perfect(seed):
    rng = np.random.default_rng(seed)
    tax = two_object_tax()
    gts = [rng.integers(0, 4, (12, 12)) for _ in range(3)]
    preds = [rng.integers(0, 4, (12, 12)) for _ in range(3)]
    rep = _all_metrics(preds, gts, tax)
    for v in rep.headline().values():
        assert math.isnan(v) or 0.0 <= v <= 100.0
    perfect = _all_metrics(gts, gts, tax)
    for v in perfect.headline().values():
        assert math.isnan(v) or v == 100.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_label_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    tax = two_object_tax()
    gts = [rng.integers(0, 4, (12, 12)) for _ in range(3)]
    preds = [rng.integers(0, 4, (12, 12)) for _ in range(3)]
    perm = np.concatenate([[0], 1 + rng.permutation(3)])
    a = _all_metrics(preds, gts, tax).headline()
    b = _all_metrics([perm[p] for p in preds], [perm[g] for g in gts], tax.permuted(perm)).headline()
    for k in a:
        assert (math.isnan(a[k]) and math.isnan(b[k])) or a[k] == pytest.approx(b[k], abs=1e-9)


def test_per_class_csv_rows(tmp_path):
    tax = two_object_tax()
    gt = np.zeros((8, 8), int)
    gt[2:4, 2:4] = 1
    rep = _all_metrics([gt], [gt], tax)
    rep.write_per_class_csv(tmp_path / "pc.csv")
    lines = [l for l in (tmp_path / "pc.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 1 + tax.num_classes


def test_report_json_has_no_nan(tmp_path):
    tax = two_object_tax()
    gt = np.zeros((30, 30), int)
    gt[:, :26] = 1  # no small components, so mIoU_small is undefined
    rep = _all_metrics([gt], [gt], tax)
    assert math.isnan(rep.headline()["mIoU_small"])
    write_report_json(tmp_path / "m.json", rep)
    data = json.loads((tmp_path / "m.json").read_text(), parse_constant=lambda c: pytest.fail(c))
    assert data["metrics"]["mIoU_small"] is None

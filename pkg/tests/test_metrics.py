import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshvox.metrics import Confusion, avd, confusion, dice, evaluate, mcc
from meshvox.voxel import LabelMask


def brute_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_mcc(tp, fp, fn, tn):
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(den)


def test_confusion_identical():
    m = np.zeros(64, np.uint8)
    m[:10] = 1
    m = m.reshape(4, 4, 4)
    assert confusion(m, m) == Confusion(10, 0, 0, 54)


def test_confusion_all_background_prediction():
    gt = np.zeros((4, 4, 4), np.uint8)
    gt[0, 0, :3] = 1
    c = confusion(np.zeros_like(gt), gt)
    assert c.tp == 0 and c.fn == 3


def test_dice_overlap_example():
    pred = np.zeros(16, np.uint8)
    gt = np.zeros(16, np.uint8)
    pred[0:4] = 1
    gt[1:7] = 1
    c = confusion(pred.reshape(2, 2, 4), gt.reshape(2, 2, 4))
    assert (c.tp, c.fp, c.fn) == (3, 1, 3)
    assert dice(c) == pytest.approx(0.6, abs=1e-12)


def test_dice_disjoint():
    assert dice(Confusion(0, 5, 5, 10)) == 0.0


def test_avd_examples():
    assert avd(6, 6) == 0.0
    assert avd(4, 6) == pytest.approx(1 / 3, abs=1e-12)
    assert avd(0, 6) == 1.0


def test_mcc_worked_example():
    assert mcc(Confusion(3, 1, 3, 57)) == pytest.approx(168 / math.sqrt(83520), abs=1e-12)
    assert mcc(Confusion(3, 1, 3, 57)) == pytest.approx(0.5813, abs=1e-4)


def test_mcc_single_class_prediction():
    assert mcc(Confusion(0, 0, 7, 57)) == 0.0
    assert mcc(Confusion(7, 57, 0, 0)) == 0.0


def test_identical_masks():
    rng = np.random.default_rng(0)
    m = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
    r = evaluate(m, m)
    assert r["dice"] == 1.0 and r["avd"] == 0.0 and r["mcc"] == pytest.approx(1.0)


def test_both_empty_masks_score_one():
    z = np.zeros((4, 4, 4), np.uint8)
    assert dice(confusion(z, z)) == 1.0
    assert mcc(confusion(z, z)) == 0.0


def test_avd_rejects_empty_reference():
    with pytest.raises(ValueError):
        avd(10, 0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_accepts_label_masks():
    m = LabelMask(np.eye(3, dtype=np.uint8)[None].repeat(3, 0))
    assert confusion(m, m).tp == 9


def test_random_pairs_match_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, 3))
        pred = rng.random(shape) < rng.random()
        gt = rng.random(shape) < rng.random()
        tp, fp, fn, tn = brute_counts(pred, gt)
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        want = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        assert dice(c) == pytest.approx(want, abs=1e-12)
        assert mcc(c) == pytest.approx(brute_mcc(tp, fp, fn, tn), abs=1e-12)
        if tp + fn:
            assert avd(tp + fp, tp + fn) == pytest.approx(abs(fp - fn) / (tp + fn), abs=1e-12)


def test_mcc_no_overflow_at_full_scale():
    n = 256**3
    c = Confusion(tp=300_000, fp=150_000, fn=200_000, tn=n - 650_000)
    num = c.tp * c.tn - c.fp * c.fn
    # the squared exact value from rational arithmetic
    exact_sq = Fraction(num * num, (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn))
    got = mcc(c)
    assert math.isfinite(got) and 0 < got <= 1
    assert got * got == pytest.approx(float(exact_sq), rel=1e-12)
    # int64 products would have wrapped
    assert (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn) > np.iinfo(np.int64).max


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**7))
def test_metric_ranges(tp, fp, fn, tn):
    c = Confusion(tp, fp, fn, tn)
    assert 0.0 <= dice(c) <= 1.0
    assert -1.0 <= mcc(c) <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((5, 5, 5)) < 0.4
    b = rng.random((5, 5, 5)) < 0.4
    assert dice(confusion(a, b)) == dice(confusion(b, a))
    assert mcc(confusion(a, b)) == pytest.approx(mcc(confusion(b, a)), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_equals_f1(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((6, 6, 6)) < 0.5
    b = rng.random((6, 6, 6)) < 0.5
    c = confusion(a, b)
    if c.tp == 0:
        return
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    assert dice(c) == pytest.approx(2 * precision * recall / (precision + recall), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mcc_complement_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((6, 6, 6)) < 0.3
    b = rng.random((6, 6, 6)) < 0.3
    assert mcc(confusion(~a, ~b)) == pytest.approx(mcc(confusion(a, b)), abs=1e-12)

import itertools
import json
import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentq.metrics import (MAP_THRESHOLDS, MetricsReport, average_precision, compute_report,
                             highlight_metrics, map_moments, mean_iou, recall_at_1,
                             temporal_iou)


def iou_frac(a, b):
    a = [Fraction(x) for x in a]
    b = [Fraction(x) for x in b]
    inter = max(Fraction(0), min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else Fraction(0)


def oracle_ap(preds, gts, thr):
    """Rational-arithmetic AP: at every rank, interpolated precision is the max
    precision over that rank and all later ranks; sum it at true positives."""
    if not gts:
        return 0.0
    thr = Fraction(thr).limit_denominator(1000)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], i))
    used = set()
    hits = []
    for i in order:
        cands = [(iou_frac(preds[i][:2], g), -j) for j, g in enumerate(gts)]
        ok = None
        for val, negj in sorted(cands, reverse=True):
            if val < thr:
                break
            if -negj not in used:
                ok = -negj
                break
        if ok is not None:
            used.add(ok)
        hits.append(ok is not None)
    prec = [Fraction(sum(hits[:k + 1]), k + 1) for k in range(len(hits))]
    ap = sum(max(prec[k:]) for k in range(len(hits)) if hits[k]) / len(gts)
    return ap


def _random_case(r):
    n_gt = int(r.integers(1, 4))
    n_pred = int(r.integers(0, 6))
    gts = []
    for _ in range(n_gt):
        s = int(r.integers(0, 10))
        gts.append([float(s), float(s + r.integers(1, 5))])
    preds = []
    for _ in range(n_pred):
        s = int(r.integers(0, 10))
        preds.append([float(s), float(s + r.integers(1, 5)), float(r.integers(0, 4))])
    return preds, gts


# ---------------------------------------------------------------- IoU


def test_iou_examples():
    assert temporal_iou([3, 7], [3, 7]) == 1.0
    assert temporal_iou([0, 1], [2, 3]) == 0.0
    assert temporal_iou([0, 10], [5, 15]) == pytest.approx(5 / 15, abs=1e-15)
    assert temporal_iou([2, 2], [2, 2]) == 0.0
    with pytest.raises(ValueError):
        temporal_iou([5, 1], [0, 2])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 50), st.floats(0.01, 20), st.floats(0, 50), st.floats(0.01, 20))
def test_iou_symmetric_and_bounded(s1, l1, s2, l2):
    a, b = [s1, s1 + l1], [s2, s2 + l2]
    v = temporal_iou(a, b)
    assert v == temporal_iou(b, a)
    assert 0.0 <= v <= 1.0
    # distinct spans are below 1 in exact arithmetic; the float may round up to 1
    exact = iou_frac(a, b)
    assert (exact < 1) == (a != b)
    assert v == pytest.approx(float(exact), abs=1e-12)


# ---------------------------------------------------------------- recall / mIoU


def test_recall_examples():
    gts = [[[0.0, 10.0]]] * 3
    exact = [[[0.0, 10.0, 1.0]]] * 3
    for t in (0.3, 0.5, 0.7):
        assert recall_at_1(exact, gts, t) == 1.0
    assert recall_at_1([[], [], []], gts, 0.3) == 0.0
    # top-1 IoUs 0.2, 0.4, 0.6, 0.8, 1.0 against [0, 10]
    preds = [[[0.0, 2.0, 1.0]], [[0.0, 4.0, 1.0]], [[0.0, 6.0, 1.0]], [[0.0, 8.0, 1.0]],
             [[0.0, 10.0, 1.0]]]
    assert recall_at_1(preds, [[[0.0, 10.0]]] * 5, 0.5) == pytest.approx(0.6)
    assert mean_iou(preds, [[[0.0, 10.0]]] * 5) == pytest.approx(0.6)


def test_recall_monotone_in_threshold():
    r = np.random.default_rng(0)
    cases = [_random_case(r) for _ in range(200)]
    preds, gts = [c[0] for c in cases], [c[1] for c in cases]
    vals = [recall_at_1(preds, gts, t) for t in np.round(np.arange(0.0, 1.01, 0.1), 1)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------- mAP


def test_ap_examples():
    assert all(average_precision([[1.0, 5.0, 0.9]], [[1.0, 5.0]], t) == 1.0
               for t in MAP_THRESHOLDS)
    preds = [[20.0, 25.0, 0.9], [1.0, 5.0, 0.8]]
    assert average_precision(preds, [[1.0, 5.0]], 0.5) == 0.5


def test_map_matches_oracle_on_random_cases():
    r = np.random.default_rng(1)
    for _ in range(200):
        preds, gts = _random_case(r)
        m = map_moments([preds], [gts])
        for t in MAP_THRESHOLDS:
            assert m[f"{t:.2f}"] == float(oracle_ap(preds, gts, t))


def test_map_avg_is_mean_over_grid():
    r = np.random.default_rng(2)
    cases = [_random_case(r) for _ in range(20)]
    m = map_moments([c[0] for c in cases], [c[1] for c in cases])
    assert len(MAP_THRESHOLDS) == 10
    assert m["avg"] == pytest.approx(np.mean([m[f"{t:.2f}"] for t in MAP_THRESHOLDS]), abs=1e-15)


def test_score_scaling_invariance():
    r = np.random.default_rng(3)
    cases = [_random_case(r) for _ in range(30)]
    preds, gts = [c[0] for c in cases], [c[1] for c in cases]
    scaled = [[[s, e, 3.7 * c] for s, e, c in p] for p in preds]
    sal = [r.normal(size=8) for _ in range(5)]
    lab = [(r.random(8) > 0.5).astype(float) for _ in range(5)]
    a = compute_report(preds, gts, sal, lab)
    b = compute_report(scaled, gts, [2.5 * s for s in sal], lab)
    assert a == b


# ---------------------------------------------------------------- highlight


def test_highlight_examples(caplog):
    lab = [np.array([0, 1, 0, 1.0])]
    assert highlight_metrics(lab, lab) == {"hd_map": 1.0, "hit_at_1": 1.0}
    rev = highlight_metrics([np.array([4.0, 3, 2, 1])], [np.array([0, 0, 0, 1.0])])
    assert rev["hd_map"] == 0.25 and rev["hit_at_1"] == 0.0
    with caplog.at_level(logging.INFO):
        out = highlight_metrics([np.ones(3), np.array([1.0, 0, 0])],
                                [np.zeros(3), np.array([1.0, 0, 0])])
    assert out == {"hd_map": 1.0, "hit_at_1": 1.0}
    assert "excluded" in caplog.text


def test_highlight_random_hand_ap():
    r = np.random.default_rng(4)
    s = r.normal(size=8)
    lab = np.array([1, 0, 0, 1, 0, 1, 0, 0], dtype=float)
    order = np.argsort(-s)
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if lab[i]:
            hits += 1
            total += hits / rank
    assert highlight_metrics([s], [lab])["hd_map"] == pytest.approx(total / 3, abs=1e-15)


# ---------------------------------------------------------------- report


def test_report_json_flat_and_bounded():
    r = np.random.default_rng(5)
    cases = [_random_case(r) for _ in range(10)]
    rep = compute_report([c[0] for c in cases], [c[1] for c in cases],
                         [r.normal(size=6) for _ in range(10)],
                         [np.r_[1.0, np.zeros(5)] for _ in range(10)], 0.25)
    d = json.loads(rep.to_json())
    assert list(d) == MetricsReport.columns()
    assert all(isinstance(v, float) and 0 <= v <= 1 for v in d.values())

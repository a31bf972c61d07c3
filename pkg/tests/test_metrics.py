from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gvad.geometry import Box, iou
from gvad.metrics import (
    EvalRecord,
    UndefinedMetricError,
    evaluate_classification,
    evaluate_grounding,
    f1_score,
    interval_to_frame_scores,
    mean_iou,
    per_category_report,
    pr_auc,
    pr_curve,
    prf_accuracy,
    recall_at,
    roc_auc,
    roc_curve,
)


# -- oracles -----------------------------------------------------------------

def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def threshold_ap(scores, labels):
    """AP as a sum over distinct thresholds of (delta recall) * precision."""
    n_pos = sum(labels)
    ap, prev = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        hit = [y for s, y in zip(scores, labels) if s >= t]
        rec = sum(hit) / n_pos
        ap += (rec - prev) * sum(hit) / len(hit)
        prev = rec
    return ap


def lexmax_pairs(preds, gts):
    """Matching whose descending IoU list is lexicographically largest."""
    best = []
    k = min(len(preds), len(gts))
    for ps in itertools.permutations(range(len(preds)), k):
        for gs in itertools.permutations(range(len(gts)), k):
            vals = sorted((iou(preds[p], gts[g]) for p, g in zip(ps, gs)), reverse=True)
            vals = [v for v in vals if v > 0]
            if vals > best:
                best = vals
    return best


def random_box(rng):
    x = np.sort(rng.random(2))
    y = np.sort(rng.random(2))
    return Box(float(x[0]), float(y[0]), float(x[1]), float(y[1]))


# -- classification ---------------------------------------------------------------

def test_roc_auc_example():
    assert roc_auc([0.9, 0.4, 0.3, 0.8], [1, 1, 0, 0]) == pytest.approx(0.75)


def test_roc_auc_all_equal_scores():
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


@pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0]])
def test_roc_auc_single_class(labels):
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1] * len(labels), labels)


def test_roc_auc_string_labels():
    assert roc_auc([0.9, 0.1], ["Abnormal", "Normal"]) == 1.0


def test_pr_auc_positive_ranked_last():
    assert pr_auc([0.9, 0.8, 0.1], [0, 0, 1]) == pytest.approx(1 / 3)


def test_pr_auc_no_positives():
    with pytest.raises(UndefinedMetricError):
        pr_auc([0.1, 0.2], [0, 0])


def test_classification_oracles():
    rng = np.random.default_rng(11)
    for _ in range(300):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # coarse grid so that ties occur often
        scores = rng.integers(0, 8, n) / 7
        assert roc_auc(scores, labels) == pytest.approx(pairwise_auc(list(scores), list(labels)), abs=1e-12)
        assert pr_auc(scores, labels) == pytest.approx(threshold_ap(list(scores), list(labels)), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 1000).map(lambda k: k / 1000), st.integers(0, 1)), min_size=2, max_size=40),
    st.sampled_from([np.sqrt, lambda v: v**3, lambda v: np.log1p(9 * v)]),
    st.randoms(),
)
def test_invariant_to_monotone_transform_and_permutation(batch, f, rnd):
    scores = np.array([s for s, _ in batch])
    labels = [y for _, y in batch]
    if len(set(labels)) < 2:
        return
    base_roc, base_pr = roc_auc(scores, labels), pr_auc(scores, labels)
    assert roc_auc(f(scores), labels) == pytest.approx(base_roc, abs=1e-12)
    assert pr_auc(f(scores), labels) == pytest.approx(base_pr, abs=1e-12)
    order = list(range(len(labels)))
    rnd.shuffle(order)
    assert roc_auc(scores[order], [labels[i] for i in order]) == pytest.approx(base_roc, abs=1e-12)
    assert pr_auc(scores[order], [labels[i] for i in order]) == pytest.approx(base_pr, abs=1e-12)


def test_curves_endpoints():
    fpr, tpr = roc_curve([0.9, 0.4, 0.3, 0.8], [1, 1, 0, 0])
    assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert np.trapezoid(tpr, fpr) == pytest.approx(0.75)
    rec, prec = pr_curve([0.9, 0.8, 0.1], [0, 0, 1])
    assert rec[-1] == 1.0 and prec[-1] == pytest.approx(1 / 3)


@pytest.mark.parametrize(
    "p, r, f1",
    [(0.8108, 0.8627, 0.836), (0.9084, 0.8500, 0.8782), (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)],
)
def test_f1_score(p, r, f1):
    assert f1_score(p, r) == pytest.approx(f1, abs=1e-3)


def test_prf_accuracy_counts():
    res = prf_accuracy(["Abnormal", "Abnormal", "Normal", "Normal", "Abnormal"], [1, 0, 0, 1, 1])
    assert (res.tp, res.fp, res.tn, res.fn) == (2, 1, 1, 1)
    assert res.precision == pytest.approx(2 / 3) and res.recall == pytest.approx(2 / 3)
    assert res.accuracy == pytest.approx(3 / 5)


def test_prf_empty_and_mismatch():
    with pytest.raises(UndefinedMetricError):
        prf_accuracy([], [])
    with pytest.raises(ValueError):
        prf_accuracy([1], [1, 0])


# -- grounding ---------------------------------------------------------------------

def test_mean_iou_one_pred_two_gts():
    gt1 = Box(0.0, 0.0, 0.5, 0.5)
    pred = Box(0.0, 0.0, 0.5, 0.4)  # IoU 0.8
    gt2 = Box(0.7, 0.7, 0.9, 0.9)
    assert iou(pred, gt1) == pytest.approx(0.8)
    assert mean_iou([[pred]], [[gt1, gt2]]) == pytest.approx(0.4)
    assert mean_iou([[pred]], [[gt1, gt2]], penalize_unmatched=False) == pytest.approx(0.8)


def test_mean_iou_no_predictions():
    assert mean_iou([[]], [[Box(0, 0, 0.5, 0.5)]]) == 0.0
    assert mean_iou([], []) == 0.0


def test_recall_at_example():
    g1, g2 = Box(0, 0, 0.5, 0.5), Box(0.5, 0.5, 1, 1)
    p1 = Box(0, 0, 0.5, 0.15)  # IoU 0.3
    p2 = Box(0.5, 0.5, 1, 0.6)  # IoU 0.2
    assert recall_at([[p1, p2]], [[g1, g2]]) == pytest.approx(0.5)


def test_recall_at_requires_ground_truth():
    with pytest.raises(UndefinedMetricError):
        recall_at([[Box(0, 0, 1, 1)]], [[]])


def test_recall_threshold_is_strict():
    g = Box(0, 0, 1, 1)
    p = Box(0, 0, 1, 0.25)
    assert recall_at([[p]], [[g]], threshold=0.25) == 0.0
    assert recall_at([[p]], [[g]], threshold=0.2) == 1.0


def test_grounding_oracles():
    rng = np.random.default_rng(4)
    for _ in range(200):
        preds, gts, pooled, pooled_all = [], [], [], []
        for _ in range(int(rng.integers(1, 4))):
            p = [random_box(rng) for _ in range(int(rng.integers(0, 4)))]
            g = [random_box(rng) for _ in range(int(rng.integers(1, 4)))]
            vals = lexmax_pairs(p, g)
            preds.append(p)
            gts.append(g)
            pooled.extend(vals)
            pooled_all.extend(vals + [0.0] * (len(g) - len(vals)))
        assert mean_iou(preds, gts) == pytest.approx(sum(pooled_all) / len(pooled_all), abs=1e-12)
        expected_plain = sum(pooled) / len(pooled) if pooled else 0.0
        assert mean_iou(preds, gts, penalize_unmatched=False) == pytest.approx(expected_plain, abs=1e-12)
        hits = sum(v > 0.25 for v in pooled)
        assert recall_at(preds, gts) == pytest.approx(hits / sum(len(g) for g in gts), abs=1e-12)


# -- categories and reports -----------------------------------------------------------

def category_records():
    recs = []
    for i in range(21):
        recs.append(EvalRecord(f"s{i}", 1, verdict="Abnormal" if i < 14 else "Normal", category="Shoplifting"))
    for i in range(9):
        recs.append(EvalRecord(f"a{i}", 1, verdict="Abnormal", category="Arson"))
    for i in range(150):
        recs.append(EvalRecord(f"n{i}", 0, verdict="Normal" if i < 109 else "Abnormal"))
    return recs


def test_per_category_rows():
    rows = {r.category: r for r in per_category_report(category_records())}
    assert rows["Shoplifting"].recall == Fraction(14, 21) and (rows["Shoplifting"].tp, rows["Shoplifting"].fn) == (14, 7)
    assert rows["Arson"].recall == Fraction(9, 9) == rows["Arson"].accuracy
    assert rows["Normal"].accuracy == Fraction(109, 150) and rows["Normal"].recall is None
    assert (rows["Normal"].tn, rows["Normal"].fp) == (109, 41)
    assert float(rows["Shoplifting"].recall) == pytest.approx(0.667, abs=5e-4)
    assert float(rows["Normal"].accuracy) == pytest.approx(0.727, abs=5e-4)


def test_per_category_normal_last_and_empty_omitted():
    rows = per_category_report(category_records())
    assert [r.category for r in rows] == ["Arson", "Shoplifting", "Normal"]
    assert "Burglary" not in {r.category for r in rows}


def test_eval_record_validation_and_round_trip():
    with pytest.raises(ValueError):
        EvalRecord("x", 2)
    with pytest.raises(ValueError):
        EvalRecord("x", 1, score=1.5)
    with pytest.raises(ValueError):
        EvalRecord("x", 1, verdict="Maybe")
    r = EvalRecord("x", 1, 0.7, "Abnormal", [Box(0, 0, 0.5, 0.5)], [Box(0, 0, 0.4, 0.5)], "Arson")
    assert EvalRecord.from_dict(r.to_dict()) == r
    assert EvalRecord("y", 0, score=0.2).predicted == 0


def test_evaluate_classification_report():
    recs = [EvalRecord(f"r{i}", y, s) for i, (s, y) in enumerate([(0.9, 1), (0.4, 1), (0.3, 0), (0.8, 0)])]
    rep = evaluate_classification(recs)
    assert rep.auc == pytest.approx(0.75)
    assert rep.accuracy == pytest.approx(0.5)
    text = rep.render()
    assert text.splitlines()[0].split() == ["AUC", "PR-AUC", "Acc.", "Prec.", "Rec.", "F1", "meanIoU", "R@25"]
    assert "0.7500" in text and "--" in text
    d = rep.to_dict()
    assert d["n"] == 4 and d["mean_iou"] is None


def test_evaluate_classification_single_class_leaves_auc_empty():
    rep = evaluate_classification([EvalRecord("a", 1, 0.9), EvalRecord("b", 1, 0.2)])
    assert rep.auc is None and rep.recall == pytest.approx(0.5)


def test_evaluate_grounding_uses_abnormal_with_ground_truth():
    g = Box(0, 0, 0.5, 0.5)
    recs = [
        EvalRecord("a", 1, pred_boxes=[g], gt_boxes=[g]),
        EvalRecord("b", 1, pred_boxes=[], gt_boxes=[g]),
        EvalRecord("c", 0, pred_boxes=[g], gt_boxes=[g]),
        EvalRecord("d", 1, pred_boxes=[g]),
    ]
    rep = evaluate_grounding(recs)
    assert rep.n == 2
    assert rep.mean_iou == pytest.approx(0.5) and rep.r_at_25 == pytest.approx(0.5)


def test_report_renders_category_table():
    rep = evaluate_classification(category_records())
    text = rep.render()
    assert "Shoplifting" in text and "109 TN / 41 FP" in text


# -- frame scores ----------------------------------------------------------------------

def direct_smooth(raw, sigma):
    n = len(raw)
    r = int(math.ceil(4 * sigma))
    out = np.zeros(n)
    for i in range(n):
        num = den = 0.0
        for j in range(max(0, i - r), min(n, i + r + 1)):
            w = math.exp(-0.5 * ((j - i) / sigma) ** 2)
            num += w * raw[j]
            den += w
        out[i] = num / den
    return out


def test_full_interval_is_ones_and_empty_is_zeros():
    assert np.allclose(interval_to_frame_scores([(0.0, 1.0, 1.0)], 100), 1.0)
    assert np.all(interval_to_frame_scores([], 50) == 0.0)


def test_impulse_mass_preserved_away_from_edges():
    out = interval_to_frame_scores([(0.5, 0.5, 1.0)], 200, sigma=2.0, clamp=False)
    assert out.sum() == pytest.approx(1.0, abs=1e-3)
    assert int(np.argmax(out)) == 100


@pytest.mark.parametrize("n, sigma", [(100, 2.0), (30, 3.5), (7, 3.0), (1, 1.0), (64, 0.0)])
def test_smoothing_matches_direct_sum(n, sigma):
    rng = np.random.default_rng(n)
    ivs = [(float(a), float(a + w), float(s)) for a, w, s in zip(rng.random(3) * 0.8, rng.random(3) * 0.3, rng.random(3))]
    out = interval_to_frame_scores(ivs, n, sigma=sigma)
    raw = interval_to_frame_scores(ivs, n, sigma=0.0)
    expected = raw if sigma == 0 else direct_smooth(raw, sigma)
    assert np.allclose(out, np.clip(expected, 0, 1), atol=1e-12)
    assert np.all((out >= 0) & (out <= 1))


def test_frame_scores_validation():
    with pytest.raises(ValueError):
        interval_to_frame_scores([], 0)

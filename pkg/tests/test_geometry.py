from __future__ import annotations

import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gvad.geometry import (
    BinBox,
    BinRangeError,
    Box,
    Detection,
    area_fraction,
    from_bins,
    giou,
    greedy_best_match,
    greedy_dedup,
    hungarian,
    iou,
    label_match,
    to_bins,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def boxes(draw):
    x = sorted([draw(unit), draw(unit)])
    y = sorted([draw(unit), draw(unit)])
    return Box(x[0], y[0], x[1], y[1])


def solid(b: Box) -> bool:
    return b.width * b.height > 1e-9


def rand_box(rng: random.Random, min_size=0.02) -> Box:
    w, h = rng.uniform(min_size, 0.6), rng.uniform(min_size, 0.6)
    x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
    return Box(x, y, x + w, y + h)


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((0.1, 0.1, 0.5, 0.5), (0.1, 0.1, 0.5, 0.5), 1.0),
        ((0, 0, 1, 1), (2 / 3, 2 / 3, 1, 1), 1 / 9),
        ((0, 0, 0.1, 0.1), (0.5, 0.5, 0.6, 0.6), 0.0),
    ],
)
def test_iou_examples(a, b, expected):
    assert iou(Box.of(a), Box.of(b)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((0.2, 0.2, 0.4, 0.9), (0.2, 0.2, 0.4, 0.9), 1.0),
        ((0, 0, 1 / 3, 1 / 3), (2 / 3, 2 / 3, 1, 1), -7 / 9),
        ((0, 0, 0.5, 1), (0.5, 0, 1, 1), 0.0),
    ],
)
def test_giou_examples(a, b, expected):
    assert giou(Box.of(a), Box.of(b)) == pytest.approx(expected, abs=1e-12)


def test_degenerate_boxes_have_zero_iou():
    pt = Box(0.3, 0.3, 0.3, 0.3)
    assert iou(pt, pt) == 0.0
    assert iou(pt, Box(0, 0, 1, 1)) == 0.0


def test_bins_examples():
    assert to_bins(Box(0, 0, 1, 1)).as_list() == [0, 0, 1000, 1000]
    assert to_bins(Box(0.247, 0.318, 0.448, 0.853)).as_list() == [247, 318, 448, 853]
    assert from_bins([1000, 1000, 1000, 1000]).as_tuple() == (1.0, 1.0, 1.0, 1.0)


def test_bins_round_half_up():
    assert to_bins(Box(0.0005, 0.0015, 0.5, 0.5)).as_list()[:2] == [1, 2]


@pytest.mark.parametrize("bad", [[-1, 0, 5, 5], [0, 0, 1001, 5]])
def test_bins_out_of_range(bad):
    with pytest.raises(BinRangeError):
        from_bins(bad)


def test_bins_round_trip_10k():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10_000):
        x = np.sort(rng.random(2))
        y = np.sort(rng.random(2))
        b = Box(x[0], y[0], x[1], y[1])
        back = from_bins(to_bins(b))
        worst = max(worst, max(abs(u - v) for u, v in zip(b.as_tuple(), back.as_tuple())))
    assert worst <= 5e-4


@pytest.mark.parametrize(
    "coords, expected", [((0, 0, 1, 1), 1.0), ((0, 0, 0.5, 0.5), 0.25), ((0.1, 0.1, 0.9, 0.7), 0.48)]
)
def test_area_fraction(coords, expected):
    assert area_fraction(Box.of(coords)) == pytest.approx(expected)


@settings(max_examples=300, deadline=None)
@given(boxes(), boxes())
def test_iou_giou_properties(a, b):
    v = iou(a, b)
    g = giou(a, b)
    assert 0.0 <= v <= 1.0
    assert g <= v + 1e-12
    assert -1.0 <= g <= 1.0
    if solid(a) and solid(b):
        assert g > -1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert g == pytest.approx(giou(b, a), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(boxes())
def test_giou_self_is_one(a):
    if solid(a):
        assert giou(a, a) == pytest.approx(1.0)


# -- greedy deduplication -----------------------------------------------------

def det(box, conf, label="man"):
    return Detection(label, Box.of(box), conf)


def test_dedup_skips_overlapping_duplicate():
    A = (0.1, 0.1, 0.5, 0.5)
    A2 = (0.1, 0.1, 0.5, 0.5 * 0.9 + 0.1 * 0.1)  # IoU(A, A2) = 0.9
    assert iou(Box.of(A), Box.of(A2)) == pytest.approx(0.9)
    B = (0.6, 0.6, 0.9, 0.9)
    cands = []
    for q in ("man#1", "man#2"):
        cands += [(q, det(A, 0.9)), (q, det(A2, 0.8)), (q, det(B, 0.6))]
    a = greedy_dedup(cands)
    got = {q: cands[i][1] for q, i in a.pairs}
    assert got["man#1"].box == Box.of(A)
    assert got["man#2"].box == Box.of(B)
    assert a.unmatched == []


def test_dedup_single():
    a = greedy_dedup([("q", det((0, 0, 0.2, 0.2), 0.5))])
    assert a.pairs == [("q", 0)]


def test_dedup_identical_boxes():
    cands = [(q, det((0.2, 0.2, 0.4, 0.4), 0.7)) for q in range(3)]
    a = greedy_dedup(cands)
    assert len(a.pairs) == 1
    assert a.unmatched == [1, 2]


def test_dedup_lists_queries_without_candidates():
    a = greedy_dedup([], queries=["x", "y"])
    assert a.pairs == [] and a.unmatched == ["x", "y"]


def test_dedup_rejects_bad_threshold():
    with pytest.raises(ValueError):
        greedy_dedup([], iou_skip=0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), boxes(), st.floats(0, 1)), max_size=12))
def test_dedup_invariants(raw):
    cands = [(q, Detection("obj", b, c)) for q, b, c in raw]
    a = greedy_dedup(cands)
    idx = [i for _, i in a.pairs]
    assert len(set(idx)) == len(idx)
    assert len({q for q, _ in a.pairs}) == len(a.pairs)
    for i, j in itertools.combinations(idx, 2):
        assert iou(cands[i][1].box, cands[j][1].box) <= 0.5
    assert set(a.unmatched).isdisjoint(q for q, _ in a.pairs)
    assert set(a.unmatched) | {q for q, _ in a.pairs} == {q for q, _ in cands}


# -- greedy best match ----------------------------------------------------------

def test_best_match_examples():
    G = [Box(0.1, 0.1, 0.3, 0.3), Box(0.5, 0.5, 0.9, 0.9)]
    m = greedy_best_match(G, G)
    assert sorted(m.pairs) == [(0, 0, 1.0), (1, 1, 1.0)]

    disjoint = greedy_best_match([Box(0, 0, 0.1, 0.1)], [Box(0.5, 0.5, 0.6, 0.6)])
    assert disjoint.pairs == [] and disjoint.unmatched_gts == [0]


def test_best_match_prefers_higher_iou():
    P = Box(0.0, 0.0, 0.6, 1.0)
    G1 = Box(0.0, 0.0, 1.0, 1.0)  # IoU 0.6
    G2 = Box(0.5, 0.0, 1.0, 1.0)  # IoU 0.1/1.0
    assert iou(P, G1) == pytest.approx(0.6)
    m = greedy_best_match([P], [G1, G2])
    assert [(p, g) for p, g, _ in m.pairs] == [(0, 0)]


def _lexmax_oracle(preds, gts):
    """Best injection under the greedy objective: the descending vector of
    matched IoUs, compared lexicographically."""
    best = ()
    n, m = len(preds), len(gts)
    k = min(n, m)
    for chosen in itertools.permutations(range(m), k):
        for rows in itertools.combinations(range(n), k):
            vals = [iou(preds[r], gts[c]) for r, c in zip(rows, chosen)]
            vec = tuple(sorted((v for v in vals if v > 0), reverse=True))
            if vec > best:
                best = vec
    return best


def test_best_match_matches_lexicographic_oracle():
    rng = random.Random(3)
    for _ in range(200):
        preds = [rand_box(rng) for _ in range(rng.randint(0, 5))]
        gts = [rand_box(rng) for _ in range(rng.randint(0, 5))]
        m = greedy_best_match(preds, gts)
        assert tuple(sorted(m.ious, reverse=True)) == pytest.approx(_lexmax_oracle(preds, gts), abs=1e-12)


def test_best_match_does_not_maximize_pair_count():
    # P1 overlaps G1 strongly and G2 weakly; P2 overlaps only G1. Greedy
    # takes P1-G1 and stops at one pair although P1-G2 / P2-G1 gives two.
    G1, G2 = Box(0.0, 0.0, 0.4, 0.4), Box(0.35, 0.0, 0.6, 0.4)
    P1, P2 = Box(0.0, 0.0, 0.4, 0.38), Box(0.0, 0.3, 0.1, 0.5)
    assert iou(P1, G1) > iou(P1, G2) > 0
    assert iou(P2, G1) > 0 and iou(P2, G2) == 0
    m = greedy_best_match([P1, P2], [G1, G2])
    assert [(p, g) for p, g, _ in m.pairs] == [(0, 0)]


# -- hungarian ------------------------------------------------------------------

@pytest.mark.parametrize(
    "cost, pairs, total",
    [
        ([[0, 1], [1, 0]], [(0, 0), (1, 1)], 0.0),
        ([[4, 1], [2, 3]], [(0, 1), (1, 0)], 3.0),
        ([[7]], [(0, 0)], 7.0),
    ],
)
def test_hungarian_examples(cost, pairs, total):
    got, c = hungarian(cost)
    assert sorted(got) == pairs
    assert c == total


def test_hungarian_empty():
    assert hungarian(np.zeros((0, 0))) == ([], 0.0)


def test_hungarian_rejects_nonfinite():
    with pytest.raises(ValueError):
        hungarian([[1.0, np.inf], [0.0, 1.0]])


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        cost = rng.integers(0, 20, size=(n, n)).astype(float)
        pairs, total = hungarian(cost)
        brute = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        assert total == brute
        assert len(pairs) == n
        assert len({c for _, c in pairs}) == n


# -- labels ---------------------------------------------------------------------

@pytest.mark.parametrize(
    "a, b, expected",
    [("man", "man in white shirt", True), ("car", "car", True), ("ladder", "wall", False),
     (" Man ", "MAN", True), ("", "man", False)],
)
def test_label_match(a, b, expected):
    assert label_match(a, b) is expected
    assert label_match(b, a) is expected


@pytest.mark.parametrize("label, conf", [("Man", 0.5), ("", 0.5), ("man", 1.2), ("man", -0.1)])
def test_detection_validation(label, conf):
    with pytest.raises(ValueError):
        Detection(label, Box(0, 0, 1, 1), conf)


def test_binbox_type_checks():
    with pytest.raises(TypeError):
        BinBox(1.5, 0, 2, 2)
    assert BinBox.of([1, 2, 3, 4]).render() == "[1, 2, 3, 4]"

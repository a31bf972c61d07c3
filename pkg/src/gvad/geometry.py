"""Box geometry, overlap scores and the matching routines shared by the
grounding pipeline, the coordinate loss and the evaluation metrics.

Boxes are ``(x1, y1, x2, y2)`` in normalized frame coordinates. Zero-area
boxes are legal everywhere and overlap nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

BIN_SCALE = 1000


class BinRangeError(ValueError):
    """A coordinate bin fell outside ``[0, 1000]``."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ValueError(f"box coordinate {v!r} outside [0, 1]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {self.as_tuple()}")

    @classmethod
    def of(cls, coords: Sequence[float]) -> "Box":
        x1, y1, x2, y2 = (float(c) for c in coords)
        return cls(x1, y1, x2, y2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1


@dataclass(frozen=True)
class BinBox:
    """Box rendered on the integer ``[0, 1000]`` grid used in prompts."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise TypeError(f"bin {v!r} is not an integer")
            if not 0 <= v <= BIN_SCALE:
                raise BinRangeError(f"bin {v} outside [0, {BIN_SCALE}]")

    @classmethod
    def of(cls, coords: Sequence[int]) -> "BinBox":
        x1, y1, x2, y2 = coords
        return cls(int(x1), int(y1), int(x2), int(y2))

    def as_list(self) -> list[int]:
        return [int(self.x1), int(self.y1), int(self.x2), int(self.y2)]

    def render(self) -> str:
        return "[{}, {}, {}, {}]".format(*self.as_list())


@dataclass(frozen=True)
class Detection:
    label: str
    box: Box
    confidence: float
    query: str | None = None  # text query that produced the hit, if known

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence!r} outside [0, 1]")
        if not self.label or self.label != self.label.lower():
            raise ValueError(f"detection label must be non-empty lowercase: {self.label!r}")


@dataclass
class Assignment:
    """One-to-one pairing of queries to detections.

    ``pairs`` holds ``(query, detection_index)``; every query that was not
    paired is listed in ``unmatched``.
    """

    pairs: list[tuple] = field(default_factory=list)
    unmatched: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(self.pairs)


@dataclass
class BestMatch:
    pairs: list[tuple[int, int, float]]  # (pred index, gt index, iou)
    unmatched_preds: list[int]
    unmatched_gts: list[int]

    @property
    def ious(self) -> list[float]:
        return [p[2] for p in self.pairs]


def _coords(b) -> tuple[float, float, float, float]:
    if isinstance(b, Box):
        return b.as_tuple()
    x1, y1, x2, y2 = b
    return float(x1), float(y1), float(x2), float(y2)


def area_fraction(b: Box) -> float:
    x1, y1, x2, y2 = _coords(b)
    return (x2 - x1) * (y2 - y1)


def _inter_union_enclose(a, b) -> tuple[float, float, float]:
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, enclose


def iou(a: Box, b: Box) -> float:
    inter, union, _ = _inter_union_enclose(a, b)
    if union <= 0.0 or inter <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    inter, union, enclose = _inter_union_enclose(a, b)
    overlap = inter / union if union > 0.0 and inter > 0.0 else 0.0
    if enclose <= 0.0:
        return overlap
    return overlap - (enclose - union) / enclose


def _half_up(v: float) -> int:
    # the 1e-9 guard absorbs representation error such as 0.2465 * 1000 = 246.49999...
    return int(math.floor(v * BIN_SCALE + 0.5 + 1e-9))


def to_bins(b: Box) -> BinBox:
    return BinBox(*(_half_up(v) for v in _coords(b)))


def from_bins(bb: BinBox | Sequence[int]) -> Box:
    if not isinstance(bb, BinBox):
        bb = BinBox.of(bb)
    return Box(*(v / BIN_SCALE for v in bb.as_list()))


def label_match(a: str, b: str) -> bool:
    """Bidirectional, case-insensitive substring test."""
    a = a.strip().lower()
    b = b.strip().lower()
    if not a or not b:
        return False
    return a in b or b in a


def greedy_dedup(
    candidates: Sequence[tuple[object, Detection]],
    iou_skip: float = 0.5,
    queries: Iterable | None = None,
) -> Assignment:
    """Confidence-ordered one-box-per-query assignment.

    Candidates are visited by descending confidence (stable on input order).
    A candidate is taken when its query is still open and its box overlaps
    every box taken so far by at most ``iou_skip``. ``queries`` lists query
    ids that may have no candidates at all so they still show up as unmatched.
    """
    if not 0.0 < iou_skip <= 1.0:
        raise ValueError(f"iou_skip must be in (0, 1], got {iou_skip}")
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i][1].confidence)
    taken_queries: set = set()
    taken_boxes: list[Box] = []
    pairs: list[tuple] = []
    for i in order:
        qid, det = candidates[i]
        if qid in taken_queries:
            continue
        if any(iou(det.box, other) > iou_skip for other in taken_boxes):
            continue
        taken_queries.add(qid)
        taken_boxes.append(det.box)
        pairs.append((qid, i))

    all_queries: list = []
    seen: set = set()
    for qid in list(queries or []) + [c[0] for c in candidates]:
        if qid not in seen:
            seen.add(qid)
            all_queries.append(qid)
    unmatched = [q for q in all_queries if q not in taken_queries]
    return Assignment(pairs=pairs, unmatched=unmatched)


def greedy_best_match(preds: Sequence[Box], gts: Sequence[Box]) -> BestMatch:
    """Repeatedly pair the globally best-overlapping unmatched (pred, gt)."""
    scored = []
    for p, pb in enumerate(preds):
        for g, gb in enumerate(gts):
            v = iou(pb, gb)
            if v > 0.0:
                scored.append((-v, p, g))
    scored.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for neg, p, g in scored:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g, -neg))
    return BestMatch(
        pairs=pairs,
        unmatched_preds=[p for p in range(len(preds)) if p not in used_p],
        unmatched_gts=[g for g in range(len(gts)) if g not in used_g],
    )


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment of rows to columns.

    Returns ``(pairs, total_cost)``; rectangular matrices match
    ``min(rows, cols)`` pairs.
    """
    c = np.asarray(cost, dtype=float)
    if c.size == 0:
        return [], 0.0
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(c)
    pairs = [(int(r), int(k)) for r, k in zip(rows, cols)]
    return pairs, float(c[rows, cols].sum())

"""Classification and spatial-grounding metrics."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, greedy_best_match
from .scene_gate import ABNORMAL, NORMAL


class UndefinedMetricError(ValueError):
    pass


def _labels01(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype.kind in "US":
        y = np.array([1 if str(v) == ABNORMAL else 0 for v in y])
    y = y.astype(int)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1 (or Normal/Abnormal)")
    return y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked
    correctly, ties worth one half."""
    s = np.asarray(scores, dtype=float)
    y = _labels01(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Step-wise average precision over descending score thresholds."""
    s = np.asarray(scores, dtype=float)
    y = _labels01(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            tp += int(y[j])
            fp += int(1 - y[j])
            j += 1
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(ap)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = _labels01(labels)
    thr = np.unique(s)[::-1]
    n_pos, n_neg = max(y.sum(), 1), max(len(y) - y.sum(), 1)
    fpr = [0.0] + [float(((s >= t) & (y == 0)).sum() / n_neg) for t in thr]
    tpr = [0.0] + [float(((s >= t) & (y == 1)).sum() / n_pos) for t in thr]
    return np.array(fpr), np.array(tpr)


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = _labels01(labels)
    thr = np.unique(s)[::-1]
    n_pos = max(y.sum(), 1)
    rec, prec = [], []
    for t in thr:
        hit = s >= t
        tp = float((hit & (y == 1)).sum())
        rec.append(tp / n_pos)
        prec.append(tp / max(hit.sum(), 1))
    return np.array(rec), np.array(prec)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int


def prf_accuracy(verdicts, labels) -> PRF:
    """Precision, recall, F1 and accuracy with Abnormal as the positive class."""
    v = _labels01(verdicts)
    y = _labels01(labels)
    if len(v) != len(y):
        raise ValueError("verdicts and labels differ in length")
    if len(y) == 0:
        raise UndefinedMetricError("no samples")
    tp = int(((v == 1) & (y == 1)).sum())
    fp = int(((v == 1) & (y == 0)).sum())
    tn = int(((v == 0) & (y == 0)).sum())
    fn = int(((v == 0) & (y == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return PRF(precision, recall, f1_score(precision, recall), (tp + tn) / len(y), tp, fp, tn, fn)


# -- grounding ---------------------------------------------------------------

def _pool_ious(preds: Sequence[Sequence[Box]], gts: Sequence[Sequence[Box]], penalize_unmatched: bool):
    if len(preds) != len(gts):
        raise ValueError("preds and gts must cover the same samples")
    pool: list[float] = []
    for p, g in zip(preds, gts):
        m = greedy_best_match(p, g)
        pool.extend(m.ious)
        if penalize_unmatched:
            pool.extend([0.0] * len(m.unmatched_gts))
    return pool


def mean_iou(preds: Sequence[Sequence[Box]], gts: Sequence[Sequence[Box]], penalize_unmatched: bool = True) -> float:
    """Mean IoU over greedily matched pairs, pooled across samples.

    With ``penalize_unmatched`` every ground-truth box left without a
    partner adds a zero to the pool.
    """
    pool = _pool_ious(preds, gts, penalize_unmatched)
    if not pool:
        return 0.0
    return float(sum(pool) / len(pool))


def recall_at(preds: Sequence[Sequence[Box]], gts: Sequence[Sequence[Box]], threshold: float = 0.25) -> float:
    """Share of ground-truth boxes greedily matched with IoU above ``threshold``."""
    if len(preds) != len(gts):
        raise ValueError("preds and gts must cover the same samples")
    total = sum(len(g) for g in gts)
    if total == 0:
        raise UndefinedMetricError("recall needs at least one ground-truth box")
    hits = 0
    for p, g in zip(preds, gts):
        hits += sum(1 for _, _, v in greedy_best_match(p, g).pairs if v > threshold)
    return hits / total


# -- records & reports -------------------------------------------------------

@dataclass
class EvalRecord:
    sample_id: str
    label: int
    score: float | None = None
    verdict: str | None = None
    pred_boxes: list[Box] = field(default_factory=list)
    gt_boxes: list[Box] = field(default_factory=list)
    category: str | None = None

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be in [0, 1]")
        if self.verdict is not None and self.verdict not in (NORMAL, ABNORMAL):
            raise ValueError("verdict must be Normal or Abnormal")

    @property
    def predicted(self) -> int:
        if self.verdict is not None:
            return int(self.verdict == ABNORMAL)
        if self.score is not None:
            return int(self.score >= 0.5)
        raise ValueError(f"{self.sample_id}: neither verdict nor score")

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalRecord":
        return cls(
            sample_id=str(d["sample_id"]),
            label=int(d["label"]),
            score=None if d.get("score") is None else float(d["score"]),
            verdict=d.get("verdict"),
            pred_boxes=[Box.of(b) for b in d.get("pred_boxes") or []],
            gt_boxes=[Box.of(b) for b in d.get("gt_boxes") or []],
            category=d.get("category"),
        )

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "label": self.label,
            "score": self.score,
            "verdict": self.verdict,
            "pred_boxes": [list(b.as_tuple()) for b in self.pred_boxes],
            "gt_boxes": [list(b.as_tuple()) for b in self.gt_boxes],
            "category": self.category,
        }


@dataclass
class CategoryRow:
    category: str
    total: int
    tp: int
    fn: int
    accuracy: Fraction
    recall: Fraction | None  # None for the normal row
    tn: int = 0
    fp: int = 0


def per_category_report(records: Sequence[EvalRecord], normal_name: str = NORMAL) -> list[CategoryRow]:
    """Per-category counts; accuracy and recall as exact fractions.

    Abnormal categories report TP/FN; the normal category reports TN/FP and
    accuracy only. Records without a category fall under ``normal_name``
    when normal, and are skipped when abnormal.
    """
    groups: "OrderedDict[str, list[EvalRecord]]" = OrderedDict()
    for r in records:
        cat = r.category or (normal_name if r.label == 0 else None)
        if cat is None:
            continue
        groups.setdefault(cat, []).append(r)
    rows = []
    for cat in sorted(groups, key=lambda c: (c == normal_name, c)):
        rs = groups[cat]
        if not rs:
            continue
        if all(r.label == 0 for r in rs):
            tn = sum(r.predicted == 0 for r in rs)
            fp = len(rs) - tn
            rows.append(CategoryRow(cat, len(rs), 0, 0, Fraction(tn, len(rs)), None, tn, fp))
            continue
        pos = [r for r in rs if r.label == 1]
        tp = sum(r.predicted == 1 for r in pos)
        fn = len(pos) - tp
        correct = tp + sum(r.predicted == 0 for r in rs if r.label == 0)
        rows.append(CategoryRow(cat, len(rs), tp, fn, Fraction(correct, len(rs)), Fraction(tp, len(pos))))
    return rows


def interval_to_frame_scores(
    intervals: Sequence[tuple[float, float, float]],
    n_frames: int,
    sigma: float | None = None,
    clamp: bool = True,
) -> np.ndarray:
    """Rasterize ``(start_frac, end_frac, score)`` intervals onto frames, then
    Gaussian-smooth.

    The kernel is truncated at four standard deviations and renormalized
    over the in-range part near the edges. ``sigma`` defaults to 2% of the
    video length, in frames.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    raw = np.zeros(n_frames)
    for a, b, score in intervals:
        a, b = max(0.0, float(a)), min(1.0, float(b))
        if b < a:
            continue
        lo = int(math.floor(a * n_frames))
        hi = max(lo + 1, int(math.ceil(b * n_frames)))
        raw[lo:min(hi, n_frames)] = np.maximum(raw[lo:min(hi, n_frames)], float(score))
    if sigma is None:
        sigma = 0.02 * n_frames
    if sigma <= 0:
        out = raw
    else:
        radius = int(math.ceil(4 * sigma))
        offs = np.arange(-radius, radius + 1)
        kernel = np.exp(-0.5 * (offs / sigma) ** 2)
        num = np.convolve(raw, kernel, mode="same") if n_frames >= len(kernel) else _direct_conv(raw, kernel)
        den = np.convolve(np.ones(n_frames), kernel, mode="same") if n_frames >= len(kernel) else _direct_conv(np.ones(n_frames), kernel)
        out = num / den
    return np.clip(out, 0.0, 1.0) if clamp else out


def _direct_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    out = np.zeros(len(x))
    for i in range(len(x)):
        for j in range(len(x)):
            k = j - i + r
            if 0 <= k < len(kernel):
                out[i] += kernel[k] * x[j]
    return out


@dataclass
class EvalReport:
    n: int = 0
    auc: float | None = None
    pr_auc: float | None = None
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    mean_iou: float | None = None
    r_at_25: float | None = None
    categories: list[CategoryRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "categories"}
        d["categories"] = [
            {
                "category": r.category,
                "total": r.total,
                "tp": r.tp,
                "fn": r.fn,
                "tn": r.tn,
                "fp": r.fp,
                "accuracy": float(r.accuracy),
                "recall": None if r.recall is None else float(r.recall),
            }
            for r in self.categories
        ]
        return d

    def render(self) -> str:
        def f(v, nd=4):
            return "--" if v is None else f"{v:.{nd}f}"

        head = ["AUC", "PR-AUC", "Acc.", "Prec.", "Rec.", "F1", "meanIoU", "R@25"]
        vals = [self.auc, self.pr_auc, self.accuracy, self.precision, self.recall, self.f1, self.mean_iou, self.r_at_25]
        lines = ["  ".join(f"{h:>8}" for h in head), "  ".join(f"{f(v):>8}" for v in vals)]
        if self.categories:
            lines.append("")
            lines.append(f"{'Category':<16}{'Total':>7}{'TP':>6}{'FN':>6}{'Acc.':>8}{'Recall':>8}")
            for r in self.categories:
                if r.recall is None:
                    lines.append(f"{r.category:<16}{r.total:>7}  {f'{r.tn} TN / {r.fp} FP':>14}{float(r.accuracy):>8.3f}{'--':>8}")
                else:
                    lines.append(f"{r.category:<16}{r.total:>7}{r.tp:>6}{r.fn:>6}{float(r.accuracy):>8.3f}{float(r.recall):>8.3f}")
        return "\n".join(lines) + "\n"


def evaluate_classification(records: Sequence[EvalRecord]) -> EvalReport:
    y = [r.label for r in records]
    rep = EvalReport(n=len(records))
    scored = [r for r in records if r.score is not None]
    if len(scored) == len(records) and 0 < sum(y) < len(y):
        rep.auc = roc_auc([r.score for r in scored], y)
        rep.pr_auc = pr_auc([r.score for r in scored], y)
    prf = prf_accuracy([r.predicted for r in records], y)
    rep.accuracy, rep.precision, rep.recall, rep.f1 = prf.accuracy, prf.precision, prf.recall, prf.f1
    rep.categories = per_category_report(records)
    return rep


def evaluate_grounding(records: Sequence[EvalRecord], threshold: float = 0.25, penalize_unmatched: bool = True) -> EvalReport:
    """meanIoU / R@threshold over abnormal samples that carry ground truth."""
    rs = [r for r in records if r.label == 1 and r.gt_boxes]
    rep = EvalReport(n=len(rs))
    preds = [r.pred_boxes for r in rs]
    gts = [r.gt_boxes for r in rs]
    rep.mean_iou = mean_iou(preds, gts, penalize_unmatched)
    rep.r_at_25 = recall_at(preds, gts, threshold)
    return rep

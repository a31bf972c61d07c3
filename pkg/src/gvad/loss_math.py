"""Training-objective arithmetic on externally produced logits.

Nothing here runs a model. Functions take logits as numpy arrays and
return scalar losses (and, for the coordinate loss, analytic gradients).
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BIN_SCALE, BinBox, hungarian, iou

log = logging.getLogger(__name__)

N_DIGITS = 10
_DIGITS = np.arange(N_DIGITS, dtype=float)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def bce(logits, labels) -> float:
    """Mean binary cross-entropy on raw logits, in log-sum-exp form."""
    l = np.asarray(logits, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if l.shape != y.shape:
        raise ValueError("logits and labels differ in length")
    if l.size == 0:
        raise ValueError("empty batch")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    per = np.maximum(l, 0.0) - l * y + np.log1p(np.exp(-np.abs(l)))
    return float(np.mean(per))


def masked_lm_ce(logits, targets, mask) -> float:
    """Summed token cross-entropy over assistant positions only.

    ``logits`` is ``(T, V)``; positions where ``mask`` is false are never
    read, so their values cannot affect the result.
    """
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets, dtype=int)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or mask.shape != targets.shape:
        raise ValueError("expected logits (T, V), targets (T,), mask (T,)")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        log.warning("masked_lm_ce: empty assistant mask, loss is 0")
        return 0.0
    tgt = targets[idx]
    if np.any(tgt < 0) or np.any(tgt >= logits.shape[1]):
        raise ValueError("target token id outside vocabulary")
    lp = _log_softmax(logits[idx])
    return float(-np.sum(lp[np.arange(idx.size), tgt]))


def soft_digits(digit_logits) -> np.ndarray:
    """Expected digit value at each position under the digit softmax."""
    d = np.asarray(digit_logits, dtype=float)
    if d.ndim != 2 or d.shape[1] != N_DIGITS:
        raise ValueError("digit logits must be shaped (positions, 10)")
    return _softmax(d) @ _DIGITS


def _place_values(n: int) -> np.ndarray:
    return np.array([10.0 ** (n - 1 - k) for k in range(n)])


def soft_coordinate(digit_logits) -> float:
    """Place-value combination of the soft digits, scaled to ``[0, 1]``."""
    s = soft_digits(digit_logits)
    return float(np.clip((_place_values(len(s)) @ s) / BIN_SCALE, 0.0, 1.0))


def hard_coordinate(digit_logits) -> float:
    d = np.asarray(digit_logits, dtype=float)
    digits = np.argmax(d, axis=1).astype(float)
    return float(np.clip((_place_values(len(digits)) @ digits) / BIN_SCALE, 0.0, 1.0))


def digit_logits_for(value: int, n: int | None = None, scale: float = 1000.0) -> np.ndarray:
    """One-hot-like digit logits spelling ``value`` (handy for fixtures)."""
    s = str(int(value))
    if n is not None:
        s = s.zfill(n)
    out = np.zeros((len(s), N_DIGITS))
    for k, ch in enumerate(s):
        out[k, int(ch)] = scale
    return out


@dataclass
class DigitLogitBox:
    """Digit logits for the four coordinates of one predicted box, plus the
    teacher-forced target bins and the object label."""

    coords: list[np.ndarray]
    target: BinBox
    label: str

    def __post_init__(self) -> None:
        if len(self.coords) != 4:
            raise ValueError("need logits for exactly four coordinates")
        fixed = []
        for c in self.coords:
            c = np.asarray(c, dtype=float)
            if c.ndim != 2 or c.shape[1] != N_DIGITS or not 1 <= c.shape[0] <= 4:
                raise ValueError("each coordinate needs 1-4 digit positions of 10 logits")
            fixed.append(c)
        self.coords = fixed
        if not isinstance(self.target, BinBox):
            self.target = BinBox.of(self.target)

    def soft_box(self) -> np.ndarray:
        return np.array([soft_coordinate(c) for c in self.coords])

    def hard_box(self) -> np.ndarray:
        return np.array([hard_coordinate(c) for c in self.coords])

    def target_box(self) -> np.ndarray:
        return np.array(self.target.as_list(), dtype=float) / BIN_SCALE


def _order(b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort corner pairs so x1 <= x2, y1 <= y2; also return the permutation
    as a 4x4 Jacobian."""
    out = b.copy()
    jac = np.eye(4)
    for lo, hi in ((0, 2), (1, 3)):
        if b[lo] > b[hi]:
            out[lo], out[hi] = b[hi], b[lo]
            jac[[lo, hi]] = jac[[hi, lo]]
    return out, jac


def giou_with_grad(pred, target) -> tuple[float, np.ndarray]:
    """GIoU of two corner boxes and its gradient w.r.t. ``pred``.

    A predicted box with crossed corners is reordered first. At points
    where a min/max switches branch the one-sided derivative of the
    ``>``-branch is returned.
    """
    raw = np.asarray(pred, dtype=float)
    a, jac = _order(raw)
    b = np.asarray(target, dtype=float)
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b

    aw, ah = ax2 - ax1, ay2 - ay1
    area_a = aw * ah
    area_b = (bx2 - bx1) * (by2 - by1)
    iw_raw = min(ax2, bx2) - max(ax1, bx1)
    ih_raw = min(ay2, by2) - max(ay1, by1)
    iw, ih = max(iw_raw, 0.0), max(ih_raw, 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    enclose = cw * ch

    if union <= 0.0 or enclose <= 0.0:
        return 0.0, np.zeros(4)
    g = inter / union - (enclose - union) / enclose

    # dg = dI*(1/U + I/U^2 - 1/C) + dA*(1/C - I/U^2) - dC*U/C^2, with U = A + B - I
    g_inter = 1.0 / union + inter / union**2 - 1.0 / enclose
    g_area = 1.0 / enclose - inter / union**2
    g_enc = -union / enclose**2

    d_area = np.array([-ah, -aw, ah, aw])
    d_iw = np.zeros(4)
    d_ih = np.zeros(4)
    if iw_raw > 0.0 and ih_raw > 0.0:
        d_iw[0] = -1.0 if ax1 > bx1 else 0.0
        d_iw[2] = 1.0 if ax2 < bx2 else 0.0
        d_ih[1] = -1.0 if ay1 > by1 else 0.0
        d_ih[3] = 1.0 if ay2 < by2 else 0.0
    d_inter = d_iw * ih + d_ih * iw
    d_cw = np.array([-1.0 if ax1 < bx1 else 0.0, 0.0, 1.0 if ax2 > bx2 else 0.0, 0.0])
    d_ch = np.array([0.0, -1.0 if ay1 < by1 else 0.0, 0.0, 1.0 if ay2 > by2 else 0.0])
    d_enc = d_cw * ch + d_ch * cw

    grad_sorted = g_inter * d_inter + g_area * d_area + g_enc * d_enc
    return float(g), jac.T @ grad_sorted


def _coordinate_grad(digit_logits: np.ndarray, upstream: float) -> np.ndarray:
    """Chain ``d loss / d coordinate`` back to the digit logits."""
    p = _softmax(digit_logits)
    s = p @ _DIGITS
    w = _place_values(digit_logits.shape[0]) / BIN_SCALE
    c = float(_place_values(digit_logits.shape[0]) @ s) / BIN_SCALE
    if c < 0.0 or c > 1.0:
        return np.zeros_like(digit_logits)  # clamped
    # d s_k / d logit_kj = p_kj (j - s_k)
    return upstream * w[:, None] * p * (_DIGITS[None, :] - s[:, None])


@dataclass
class GIoULossResult:
    loss: float
    grads: list[list[np.ndarray]]  # per box, per coordinate, (positions, 10)
    matches: list[tuple[int, int]] = field(default_factory=list)  # (pred index, gt index)
    n_matched: int = 0
    flagged: bool = False


def match_by_label(
    boxes: Sequence[DigitLogitBox],
    gts: Sequence[tuple[str, np.ndarray]],
) -> list[tuple[int, int]]:
    """Pair predictions with ground truth inside each label group by
    minimizing total ``1 - IoU`` of the hard-decoded boxes."""
    from .geometry import Box

    def as_box(c):
        x1, y1, x2, y2 = np.clip(c, 0.0, 1.0)
        return Box(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))

    pred_groups: dict[str, list[int]] = defaultdict(list)
    gt_groups: dict[str, list[int]] = defaultdict(list)
    for i, b in enumerate(boxes):
        pred_groups[b.label].append(i)
    for j, (lab, _) in enumerate(gts):
        gt_groups[lab].append(j)
    pairs = []
    for lab in sorted(pred_groups):
        pi, gj = pred_groups[lab], gt_groups.get(lab, [])
        if not gj:
            continue
        hard = [as_box(boxes[i].hard_box()) for i in pi]
        tgt = [as_box(gts[j][1]) for j in gj]
        cost = [[1.0 - iou(h, t) for t in tgt] for h in hard]
        sel, _ = hungarian(cost)
        pairs.extend((pi[r], gj[c]) for r, c in sel)
    return sorted(pairs)


def giou_loss(
    boxes: Sequence[DigitLogitBox],
    gt_boxes: Sequence[tuple[str, BinBox]] | None = None,
) -> GIoULossResult:
    """Mean ``1 - GIoU`` over label-matched (soft prediction, target) pairs,
    with the exact gradient w.r.t. every digit logit.

    Ground truth defaults to each box's own teacher-forced target; pass
    ``gt_boxes`` to score against a separately parsed target list.
    """
    if gt_boxes is None:
        gts = [(b.label, b.target_box()) for b in boxes]
    else:
        gts = [(lab, np.array(BinBox.of(bb.as_list() if isinstance(bb, BinBox) else bb).as_list(), float) / BIN_SCALE)
               for lab, bb in gt_boxes]
    if not gts:
        raise ValueError("giou_loss needs at least one ground-truth box")
    grads = [[np.zeros_like(c) for c in b.coords] for b in boxes]
    pairs = match_by_label(boxes, gts)
    if not pairs:
        log.warning("giou_loss: no label matches, loss is 0")
        return GIoULossResult(0.0, grads, [], 0, True)

    m = len(pairs)
    total = 0.0
    for i, j in pairs:
        g, dg = giou_with_grad(boxes[i].soft_box(), gts[j][1])
        total += 1.0 - g
        for k in range(4):
            grads[i][k] += _coordinate_grad(boxes[i].coords[k], -dg[k] / m)
    return GIoULossResult(total / m, grads, pairs, m, False)


def giou_loss_value(boxes: Sequence[DigitLogitBox], gt_boxes=None) -> float:
    return giou_loss(boxes, gt_boxes).loss


# -- curriculum ----------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    stage: int
    lambda_bce: float
    lambda_lm: float
    lambda_giou: float
    epochs: int
    peak_lr: float
    warmup_ratio: float
    mixture: dict = field(default_factory=dict)  # modality -> percent

    def __post_init__(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if min(self.lambda_bce, self.lambda_lm, self.lambda_giou) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.mixture and abs(sum(self.mixture.values()) - 100) > 1e-9:
            raise ValueError("mixture percentages must sum to 100")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda_bce, self.lambda_lm, self.lambda_giou)


MIN_LR_RATIO = 0.01


def default_schedule(stage3_peak_lr: float = 5e-4) -> list[StageConfig]:
    """The three-stage curriculum. ``stage3_peak_lr=2e-4`` gives the
    alternative stage-3 rate quoted alongside the published hyperparameters."""
    return [
        StageConfig(1, 1.0, 0.0, 0.0, epochs=2, peak_lr=1e-3, warmup_ratio=0.1, mixture={"video_label": 100}),
        StageConfig(2, 1.0, 0.5, 1.0, epochs=3, peak_lr=5e-4, warmup_ratio=0.05,
                    mixture={"image_detection": 80, "video_cot": 20}),
        StageConfig(3, 1.0, 0.5, 0.0, epochs=3, peak_lr=stage3_peak_lr, warmup_ratio=0.05, mixture={"video_cot": 100}),
    ]


def joint_schedule() -> list[StageConfig]:
    """Single-phase ablation: all losses from the start after the stage-1 warmup."""
    base = default_schedule()[0]
    return [base, StageConfig(2, 1.0, 0.5, 1.0, epochs=6, peak_lr=5e-4, warmup_ratio=0.05,
                              mixture={"image_detection": 50, "video_cot": 50})]


def stage_loss(stage: StageConfig, bce_val: float, lm_val: float, giou_val: float) -> float:
    # a zero weight removes the term outright, even if the value is inf/nan
    total = 0.0
    for lam, v in zip(stage.lambdas, (bce_val, lm_val, giou_val)):
        if lam != 0.0:
            total += lam * v
    return total


def end_lr(stage: StageConfig, min_ratio: float = MIN_LR_RATIO) -> float:
    return stage.peak_lr * min_ratio


def warmup_steps(stage: StageConfig, steps: int) -> int:
    return int(math.floor(stage.warmup_ratio * steps + 0.5))


def lr_at(
    schedule: Sequence[StageConfig],
    stage_index: int,
    step: int,
    steps_per_stage: Sequence[int],
    min_ratio: float = MIN_LR_RATIO,
) -> float:
    """Learning rate at ``step`` (0..steps) of ``schedule[stage_index]``.

    Linear warmup from the previous stage's cosine endpoint (0 for the
    first stage) to ``peak_lr``, then cosine decay to ``peak_lr * min_ratio``.
    """
    st = schedule[stage_index]
    n = steps_per_stage[stage_index]
    if not 0 <= step <= n:
        raise ValueError(f"step {step} outside [0, {n}]")
    start = 0.0 if stage_index == 0 else end_lr(schedule[stage_index - 1], min_ratio)
    w = warmup_steps(st, n)
    if step < w:
        return start + (st.peak_lr - start) * step / w
    if step == n:
        return end_lr(st, min_ratio)
    lo = end_lr(st, min_ratio)
    frac = (step - w) / (n - w)
    return lo + (st.peak_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))


def lr_curve(schedule: Sequence[StageConfig], steps_per_stage: Sequence[int],
             min_ratio: float = MIN_LR_RATIO) -> list[tuple[int, int, float]]:
    """``(stage, step, lr)`` for every step of every stage."""
    return [
        (schedule[s].stage, t, lr_at(schedule, s, t, steps_per_stage, min_ratio))
        for s in range(len(schedule))
        for t in range(steps_per_stage[s] + 1)
    ]


def steps_for(schedule: Sequence[StageConfig], samples_per_stage: Sequence[int], effective_batch: int = 8) -> list[int]:
    return [max(1, st.epochs * math.ceil(n / effective_batch)) for st, n in zip(schedule, samples_per_stage)]


# -- gradient verification -------------------------------------------------------

def random_digit_box(rng: np.random.Generator, label: str, n_digits: int = 3,
                     peak: float = 3.0, noise: float = 1.5) -> DigitLogitBox:
    """A target box in bins plus noisy digit logits that lean towards it."""
    top = 10**n_digits - 1
    while True:
        x1, x2 = sorted(rng.integers(0, top + 1, size=2))
        y1, y2 = sorted(rng.integers(0, top + 1, size=2))
        if x2 - x1 >= 50 and y2 - y1 >= 50 and max(x2, y2) <= BIN_SCALE:
            break
    coords = []
    for v in (x1, y1, x2, y2):
        jittered = int(np.clip(v + rng.integers(-40, 41), 0, min(top, BIN_SCALE)))
        digits = [int(ch) for ch in str(jittered).zfill(n_digits)]
        logits = rng.normal(0.0, noise, size=(n_digits, N_DIGITS))
        logits[np.arange(n_digits), digits] += peak
        coords.append(logits)
    return DigitLogitBox(coords, BinBox(int(x1), int(y1), int(x2), int(y2)), label)


def _kink_distance(boxes: Sequence[DigitLogitBox], pairs, gts) -> float:
    """Smallest gap between any two quantities compared by a min/max in the
    matched GIoU terms (and the intersection extents versus zero)."""
    gap = math.inf
    for i, j in pairs:
        a, _ = _order(boxes[i].soft_box())
        raw = boxes[i].soft_box()
        b = gts[j][1]
        gap = min(gap, abs(raw[0] - raw[2]), abs(raw[1] - raw[3]))
        gap = min(gap, *(abs(a[k] - b[k]) for k in range(4)))
        gap = min(gap, abs(min(a[2], b[2]) - max(a[0], b[0])), abs(min(a[3], b[3]) - max(a[1], b[1])))
    return gap


def finite_difference_error(boxes: Sequence[DigitLogitBox], gt_boxes=None, step: float = 1e-4) -> float:
    """Relative error between the analytic gradient of :func:`giou_loss` and
    central differences, ``||g_a - g_fd|| / max(||g_a||, ||g_fd||)`` over
    all digit logits."""
    res = giou_loss(boxes, gt_boxes)
    analytic = np.concatenate([g.ravel() for per_box in res.grads for g in per_box])
    numeric = []
    for b in boxes:
        for c in b.coords:
            for idx in np.ndindex(c.shape):
                orig = c[idx]
                c[idx] = orig + step
                up = giou_loss_value(boxes, gt_boxes)
                c[idx] = orig - step
                down = giou_loss_value(boxes, gt_boxes)
                c[idx] = orig
                numeric.append((up - down) / (2 * step))
    numeric = np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_suite(n_configs: int = 50, seed: int = 0, step: float = 1e-4,
                   min_kink_gap: float = 1e-3) -> list[float]:
    """Finite-difference check over random multi-box configurations.

    Configurations with a min/max comparison closer than ``min_kink_gap``
    are redrawn: the loss is not differentiable there and central
    differences straddling the kink measure nothing useful.
    """
    rng = np.random.default_rng(seed)
    errors = []
    while len(errors) < n_configs:
        n = int(rng.integers(1, 4))
        labels = [str(rng.choice(["man", "car", "ladder"])) for _ in range(n)]
        boxes = [random_digit_box(rng, lab, n_digits=int(rng.integers(3, 5)) if rng.random() < 0.2 else 3) for lab in labels]
        gts = [(b.label, b.target_box()) for b in boxes]
        pairs = match_by_label(boxes, gts)
        if _kink_distance(boxes, pairs, gts) < min_kink_gap:
            continue
        if any(not 0.0 < soft_coordinate(c) < 1.0 for b in boxes for c in b.coords):
            continue
        errors.append(finite_difference_error(boxes, step=step))
    return errors

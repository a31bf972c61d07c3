"""Embedding-gated temporal segmentation.

A boundary is declared at a sampled frame when its embedding's cosine
similarity to the current *boundary reference* (not the previous sample)
falls below ``tau``. Frame 0 is the initial reference. The batch
:func:`segment` and the online :class:`StreamingGate` share one decision
rule and produce identical subclips.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

NORMAL = "Normal"
ABNORMAL = "Abnormal"
EVENTS = (NORMAL, ABNORMAL)


class DomainError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class GateConfig:
    stride: int = 15
    tau: float = 0.92

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not -1.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (-1, 1)")


@dataclass(frozen=True)
class EmbeddingSample:
    frame_index: int
    embedding: np.ndarray

    @classmethod
    def of(cls, frame_index: int, embedding: Sequence[float], check_norm: bool = True) -> "EmbeddingSample":
        vec = np.asarray(embedding, dtype=float)
        if frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if check_norm and abs(float(np.linalg.norm(vec)) - 1.0) > 1e-6:
            raise DomainError(f"embedding at frame {frame_index} is not unit-norm")
        return cls(int(frame_index), vec)


@dataclass(frozen=True)
class SubclipRecord:
    video_id: str
    start_frame: int
    end_frame: int
    label: str = NORMAL
    boundary_similarity: float | None = None

    def __post_init__(self) -> None:
        if self.start_frame > self.end_frame:
            raise ValueError(f"subclip start {self.start_frame} > end {self.end_frame}")
        if self.label not in EVENTS:
            raise ValueError(f"subclip label must be Normal/Abnormal, got {self.label!r}")

    @property
    def subclip_id(self) -> str:
        return subclip_id(self.video_id, self.start_frame, self.end_frame)

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame + 1

    def to_dict(self) -> dict:
        return {
            "subclip_id": self.subclip_id,
            "video_id": self.video_id,
            "start_frame": self.start_frame,
            "end_frame": self.end_frame,
            "label": self.label,
            "boundary_similarity": self.boundary_similarity,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SubclipRecord":
        sim = d.get("boundary_similarity")
        return cls(
            video_id=d["video_id"],
            start_frame=int(d["start_frame"]),
            end_frame=int(d["end_frame"]),
            label=d.get("label", NORMAL),
            boundary_similarity=None if sim is None else float(sim),
        )

    def with_label(self, label: str) -> "SubclipRecord":
        return SubclipRecord(self.video_id, self.start_frame, self.end_frame, label, self.boundary_similarity)


def subclip_id(video_id: str, start_frame: int, end_frame: int) -> str:
    return f"{video_id}:{start_frame}-{end_frame}"


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


class StreamingGate:
    """Online form of :func:`segment` for one video.

    ``push`` returns the subclip that a newly declared boundary closes, or
    ``None``; ``flush`` closes the trailing subclip.
    """

    def __init__(self, video_id: str, cfg: GateConfig | None = None, label: str = NORMAL):
        self.video_id = video_id
        self.cfg = cfg or GateConfig()
        self.label = label
        self._ref: np.ndarray | None = None
        self._start = 0
        self._start_sim: float | None = None
        self._last_frame: int | None = None
        self._closed = False

    def push(self, sample: EmbeddingSample) -> SubclipRecord | None:
        if self._closed:
            raise ProtocolError("stream already flushed")
        f = sample.frame_index
        if self._last_frame is not None and f <= self._last_frame:
            raise ProtocolError(f"non-monotone frame index {f} after {self._last_frame}")
        self._last_frame = f
        if self._ref is None:
            self._ref = sample.embedding
            self._start = f
            return None
        sim = cosine(sample.embedding, self._ref)
        if sim >= self.cfg.tau:
            return None
        done = SubclipRecord(self.video_id, self._start, f - 1, self.label, self._start_sim)
        self._ref = sample.embedding
        self._start = f
        self._start_sim = sim
        return done

    def flush(self, total_frames: int | None = None) -> SubclipRecord | None:
        if self._closed:
            raise ProtocolError("stream already flushed")
        self._closed = True
        if total_frames is None:
            if self._last_frame is None:
                return None
            end = self._last_frame
        else:
            end = total_frames - 1
        if end < self._start:
            return None
        return SubclipRecord(self.video_id, self._start, end, self.label, self._start_sim)


def _check_grid(stream: Sequence[EmbeddingSample], stride: int, total_frames: int) -> None:
    for k, s in enumerate(stream):
        if s.frame_index != k * stride:
            raise ProtocolError(
                f"sample {k} at frame {s.frame_index}; expected {k * stride} on the stride grid"
            )
        if s.frame_index >= total_frames:
            raise ProtocolError(f"sample frame {s.frame_index} beyond total_frames={total_frames}")


def segment(
    stream: Sequence[EmbeddingSample],
    total_frames: int,
    cfg: GateConfig | None = None,
    video_id: str = "",
    label: str = NORMAL,
) -> list[SubclipRecord]:
    """Split one video into subclips from its stride-sampled embeddings."""
    cfg = cfg or GateConfig()
    if total_frames < 1:
        raise ValueError("total_frames must be >= 1")
    if not stream:
        return [SubclipRecord(video_id, 0, total_frames - 1, label, None)]
    _check_grid(stream, cfg.stride, total_frames)

    out = []
    start, start_sim = 0, None
    ref = stream[0].embedding
    for s in stream[1:]:
        sim = cosine(s.embedding, ref)
        if sim < cfg.tau:
            out.append(SubclipRecord(video_id, start, s.frame_index - 1, label, start_sim))
            start, start_sim, ref = s.frame_index, sim, s.embedding
    out.append(SubclipRecord(video_id, start, total_frames - 1, label, start_sim))
    return out


def run_stream(
    samples: Iterable[EmbeddingSample],
    video_id: str,
    cfg: GateConfig | None = None,
    total_frames: int | None = None,
) -> Iterator[SubclipRecord]:
    gate = StreamingGate(video_id, cfg)
    for s in samples:
        rec = gate.push(s)
        if rec is not None:
            yield rec
    tail = gate.flush(total_frames)
    if tail is not None:
        yield tail


def label_by_intervals(
    subclips: Sequence[SubclipRecord],
    video_label: str,
    anomaly_intervals: Sequence[tuple[int, int]] | None,
) -> list[SubclipRecord]:
    """Assign subclip labels.

    With frame-level anomaly intervals a subclip is Abnormal iff it overlaps
    one; without them every subclip inherits the video label.
    """
    if not anomaly_intervals:
        return [s.with_label(video_label) for s in subclips]
    out = []
    for s in subclips:
        hit = any(s.start_frame <= b and a <= s.end_frame for a, b in anomaly_intervals)
        out.append(s.with_label(ABNORMAL if hit else NORMAL))
    return out


@dataclass(frozen=True)
class SubsamplePolicy:
    per_video: int = 2
    # the per-video cap the global backfill may fill up to; defaults to per_video
    max_per_video: int | None = None
    target_total: int | None = None
    seed: int = 42

    @property
    def cap(self) -> int:
        return self.max_per_video if self.max_per_video is not None else self.per_video


def _longest_first(clips: Sequence[SubclipRecord]) -> list[SubclipRecord]:
    return sorted(clips, key=lambda s: (-s.n_frames, s.start_frame))


def subsample(
    by_video: Mapping[str, Sequence[SubclipRecord]],
    policy: SubsamplePolicy | None = None,
) -> list[SubclipRecord]:
    """Keep a class-balanced handful of subclips per video.

    Per video: the longest Abnormal and the longest Normal subclip (when
    present), then remaining slots from uniformly sampled leftover Normal
    subclips, then the longest leftover Abnormal ones. A ``target_total``
    shortfall is backfilled with uniformly sampled Normal subclips from
    videos still under ``max_per_video``.
    """
    policy = policy or SubsamplePolicy()
    rng = random.Random(policy.seed)
    kept: dict[str, list[SubclipRecord]] = {}
    leftovers: dict[str, list[SubclipRecord]] = {}
    for vid in sorted(by_video):
        clips = sorted(by_video[vid], key=lambda s: s.start_frame)
        ab = _longest_first([s for s in clips if s.label == ABNORMAL])
        no = _longest_first([s for s in clips if s.label == NORMAL])
        picks: list[SubclipRecord] = []
        if ab and len(picks) < policy.per_video:
            picks.append(ab.pop(0))
        if no and len(picks) < policy.per_video:
            picks.append(no.pop(0))
        room = policy.per_video - len(picks)
        if room > 0 and no:
            extra = rng.sample(no, min(room, len(no)))
            picks.extend(extra)
            no = [s for s in no if s not in extra]
            room = policy.per_video - len(picks)
        if room > 0 and ab:
            picks.extend(ab[:room])
            ab = ab[room:]
        kept[vid] = picks
        leftovers[vid] = no

    total = sum(len(v) for v in kept.values())
    target = policy.target_total
    if target is not None and total < target:
        pool = [
            (vid, s)
            for vid in sorted(leftovers)
            for s in leftovers[vid]
            if len(kept[vid]) < policy.cap
        ]
        rng.shuffle(pool)
        for vid, s in pool:
            if total >= target:
                break
            if len(kept[vid]) < policy.cap:
                kept[vid].append(s)
                total += 1
        if total < target:
            log.info("subsample shortfall: %d of %d slots filled", total, target)

    out = [s for vid in sorted(kept) for s in kept[vid]]
    return sorted(out, key=lambda s: (s.video_id, s.start_frame))

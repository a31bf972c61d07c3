"""Phase drivers shared by the CLI and the end-to-end tests.

Each phase reads plain records, calls the relevant clients with bounded
parallelism, and returns records in a deterministic order (by video id and
start frame) regardless of completion order.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, TypeVar

from . import datastore, synthetic
from .clients import Archive, ClientError, ClientSuite, mock_suite
from .cot import SynthesisRejected, synthesize
from .grounding import GroundedSet, ground_subclip
from .narration import ObjectAnnotation, align_annotations, narrate_subclip
from .scene_gate import (
    ABNORMAL,
    EmbeddingSample,
    SubclipRecord,
    SubsamplePolicy,
    label_by_intervals,
    segment,
    subsample,
)

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def pmap(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    """Ordered parallel map; results line up with ``items``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def subclip_media(media_ref: str, sub: SubclipRecord) -> str:
    return f"{media_ref}#frames={sub.start_frame}-{sub.end_frame}"


def _order(sub: SubclipRecord) -> tuple:
    return (sub.video_id, sub.start_frame)


# -- phase 1 ---------------------------------------------------------------------

def group_embeddings(rows: Iterable[Mapping]) -> dict[str, list[EmbeddingSample]]:
    by_video: dict[str, list[EmbeddingSample]] = defaultdict(list)
    for r in rows:
        by_video[r["video_id"]].append(EmbeddingSample.of(r["frame_index"], r["embedding"], check_norm=False))
    for samples in by_video.values():
        samples.sort(key=lambda s: s.frame_index)
    return dict(by_video)


def _normalize(samples: list[EmbeddingSample]) -> list[EmbeddingSample]:
    import numpy as np

    out = []
    for s in samples:
        n = float(np.linalg.norm(s.embedding))
        out.append(EmbeddingSample(s.frame_index, s.embedding / n if n else s.embedding))
    return out


def embed_video(video: Mapping, embedder, stride: int, workers: int) -> list[EmbeddingSample]:
    from .grounding import frame_ref

    frames = list(range(0, int(video["total_frames"]), stride))
    vecs = pmap(lambda f: embedder.embed(frame_ref(video["media_ref"], f)).embedding, frames, workers)
    return [EmbeddingSample(f, v) for f, v in zip(frames, vecs)]


def segment_videos(
    videos: Sequence[Mapping],
    cfg: datastore.RunConfig,
    embeddings: Mapping[str, list[EmbeddingSample]] | None = None,
    embedder=None,
) -> list[SubclipRecord]:
    """All labelled subclips of every video, in (video, start) order."""
    out: list[SubclipRecord] = []
    for v in sorted(videos, key=lambda v: v["video_id"]):
        vid = v["video_id"]
        if embeddings is not None and vid in embeddings:
            stream = _normalize(embeddings[vid])
        elif embedder is not None:
            stream = embed_video(v, embedder, cfg.gate.stride, cfg.clients.max_in_flight)
        else:
            raise ValueError(f"no embeddings for video {vid} and no embedder")
        subs = segment(stream, int(v["total_frames"]), cfg.gate, vid, v["label"])
        intervals = [tuple(iv) for iv in (v.get("anomaly_intervals") or [])]
        out.extend(label_by_intervals(subs, v["label"], intervals))
    return out


def by_video(subclips: Iterable[SubclipRecord]) -> dict[str, list[SubclipRecord]]:
    d: dict[str, list[SubclipRecord]] = defaultdict(list)
    for s in subclips:
        d[s.video_id].append(s)
    return dict(d)


def grounding_pool(
    subclips: Sequence[SubclipRecord],
    retained: Sequence[SubclipRecord],
    per_video: int,
    seed: int,
) -> list[SubclipRecord]:
    """Subclips sent to narration and grounding: every retained subclip, then
    more from the same class-balanced policy up to ``per_video`` each."""
    wider = subsample(by_video(subclips), SubsamplePolicy(per_video=per_video, seed=seed))
    keep = {s.subclip_id: s for s in retained}
    counts: dict[str, int] = defaultdict(int)
    for s in retained:
        counts[s.video_id] += 1
    for s in wider:
        if s.subclip_id not in keep and counts[s.video_id] < per_video:
            keep[s.subclip_id] = s
            counts[s.video_id] += 1
    return sorted(keep.values(), key=_order)


def phase1(videos, cfg, embeddings=None, embedder=None):
    subs = segment_videos(videos, cfg, embeddings, embedder)
    retained = subsample(by_video(subs), cfg.subsample)
    pool = grounding_pool(subs, retained, max(cfg.grounding_per_video, cfg.subsample.cap), cfg.seed)
    return subs, retained, pool


# -- phase 2 ---------------------------------------------------------------------

def narrate_all(
    pool: Sequence[SubclipRecord],
    videos: Mapping[str, Mapping],
    sentences: Mapping[str, list[Mapping]],
    vlm,
    cfg: datastore.RunConfig,
) -> list[dict]:
    def one(sub: SubclipRecord) -> dict:
        v = videos[sub.video_id]
        fps = float(v.get("fps") or cfg.fps)
        text = align_annotations(sub, sentences.get(sub.video_id, []), fps, cfg.narration.min_overlap)
        base = {"video_id": sub.video_id, "start_frame": sub.start_frame, "end_frame": sub.end_frame,
                "label": sub.label, "annotations_text": text}
        try:
            res = narrate_subclip(sub, subclip_media(v["media_ref"], sub), text, vlm, cfg.narration.parse_retries)
        except ClientError as exc:
            log.warning("narration failed for %s: %s", sub.subclip_id, exc)
            from .narration import build_narration_prompt, prompt_sha256

            return {**base, "subclip_id": sub.subclip_id, "prompt_sha256": prompt_sha256(build_narration_prompt(text)),
                    "response": "", "accepted": [], "rejected": [], "flags": [f"transport: {exc}"]}
        return {**base, **res.archive_record(), "flags": res.flags}

    return pmap(one, sorted(pool, key=_order), cfg.clients.max_in_flight)


def _annotations(rec: Mapping) -> list[ObjectAnnotation]:
    return [ObjectAnnotation.from_dict(a) for a in rec["accepted"]]


def _sub(rec: Mapping) -> SubclipRecord:
    return SubclipRecord(rec["video_id"], int(rec["start_frame"]), int(rec["end_frame"]), rec["label"])


def ground_all(annotations: Sequence[Mapping], videos: Mapping[str, Mapping], detector, cfg) -> list[dict]:
    def one(rec: Mapping) -> dict:
        sub = _sub(rec)
        gs = ground_subclip(sub, videos[sub.video_id]["media_ref"], _annotations(rec), detector, cfg.grounding)
        return gs.to_dict()

    recs = sorted(annotations, key=lambda r: (r["video_id"], r["start_frame"]))
    return pmap(one, recs, cfg.clients.max_in_flight)


# -- phase 3 ---------------------------------------------------------------------

def synth_all(
    retained: Sequence[SubclipRecord],
    annotations: Sequence[Mapping],
    grounded: Sequence[Mapping],
    videos: Mapping[str, Mapping],
    vlm,
    cfg,
) -> tuple[list[dict], list[dict]]:
    ann = {r["subclip_id"]: r for r in annotations}
    gs = {g["subclip_id"]: g for g in grounded}

    def one(sub: SubclipRecord):
        rec = ann.get(sub.subclip_id)
        g = gs.get(sub.subclip_id)
        if rec is None or g is None:
            return None, {"subclip_id": sub.subclip_id, "reason": "not narrated/grounded"}
        media = subclip_media(videos[sub.video_id]["media_ref"], sub)
        try:
            item = synthesize(media, GroundedSet.from_dict(g), rec["annotations_text"], sub.label, vlm, cfg.cot_retries)
        except (SynthesisRejected, ClientError) as exc:
            return None, {"subclip_id": sub.subclip_id, "reason": str(exc)}
        return item.to_dict(), None

    results = pmap(one, sorted(retained, key=_order), cfg.clients.max_in_flight)
    items = [r for r, _ in results if r is not None]
    rejected = [e for _, e in results if e is not None]
    return items, rejected


# -- end to end --------------------------------------------------------------------

FILES = {
    "videos": "videos.jsonl",
    "sentences": "sentences.jsonl",
    "subclips": "subclips.jsonl",
    "retained": "retained.jsonl",
    "pool": "grounding_pool.jsonl",
    "annotations": "annotations.jsonl",
    "grounded": "grounded.jsonl",
    "cot": "cot.jsonl",
    "cot_rejected": "cot_rejected.jsonl",
    "detection": "detection.jsonl",
    "stage1": "stage1.jsonl",
    "manifest": "manifest.json",
    "stats": "stats.json",
    "transcript": "transcript.jsonl",
}


def write_corpus(out: Path, seed: int, n_videos: int, embed_dim: int | None = None) -> None:
    vids = synthetic.corpus(seed, n_videos)
    datastore.write_jsonl(out / FILES["videos"], [v.to_record() for v in vids], "video")
    datastore.write_jsonl(out / FILES["sentences"], [s for v in vids for s in synthetic.sentences(seed, v.video_id)], "sentence")
    if embed_dim:
        rows = [r for v in vids for r in synthetic.embeddings(seed, v.video_id, embed_dim)]
        datastore.write_jsonl(out / "embeddings.jsonl", rows, "embedding")


def run_all(
    out: str | Path,
    cfg: datastore.RunConfig,
    n_videos: int = 40,
    suite: ClientSuite | None = None,
    archive: bool = True,
) -> dict[str, Path]:
    """Synthetic corpus plus every phase with mock clients, all to files."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    transcript = Archive(out / FILES["transcript"]) if archive else None
    suite = suite or mock_suite(cfg.seed, archive=transcript, embed_dim=cfg.embed_dim,
                                max_in_flight=cfg.clients.max_in_flight)
    write_corpus(out, cfg.seed, n_videos)
    videos = datastore.read_jsonl(out / FILES["videos"], "video")
    vmap = {v["video_id"]: v for v in videos}
    sentences: dict[str, list] = defaultdict(list)
    for s in datastore.read_jsonl(out / FILES["sentences"], "sentence"):
        sentences[s["video_id"]].append(s)

    subs, retained, pool = phase1(videos, cfg, embedder=suite.embedder)
    datastore.write_jsonl(out / FILES["subclips"], [s.to_dict() for s in subs], "subclip")
    datastore.write_jsonl(out / FILES["retained"], [s.to_dict() for s in retained], "subclip")
    datastore.write_jsonl(out / FILES["pool"], [s.to_dict() for s in pool], "subclip")

    annotations = narrate_all(pool, vmap, sentences, suite.vlm, cfg)
    datastore.write_jsonl(out / FILES["annotations"], annotations, "annotation")
    grounded = ground_all(annotations, vmap, suite.detector, cfg)
    datastore.write_jsonl(out / FILES["grounded"], grounded, "grounded")

    items, rejected = synth_all(retained, annotations, grounded, vmap, suite.vlm, cfg)
    datastore.write_jsonl(out / FILES["cot"], items, "instruction")
    datastore.write_jsonl(out / FILES["cot_rejected"], rejected)

    det = datastore.detection_items(grounded, {k: v["media_ref"] for k, v in vmap.items()})
    datastore.write_jsonl(out / FILES["detection"], det, "detection_item")
    datastore.write_jsonl(out / FILES["stage1"], datastore.stage1_items(videos))
    manifest = datastore.assemble(videos, det, items, cfg.stages, cfg.seed, cfg.assemble.stage2_slots)
    datastore.write_json(out / FILES["manifest"], manifest, "manifest")
    stats = datastore.compute_stats(videos, [s.to_dict() for s in retained], grounded, items, cfg.fps,
                                    {s.subclip_id: s.label for s in pool})
    datastore.write_json(out / FILES["stats"], stats, "stats")
    if transcript is not None:
        transcript.close()
    return {k: out / v for k, v in FILES.items() if (out / v).exists()}

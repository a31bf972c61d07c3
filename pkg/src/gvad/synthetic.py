"""A small deterministic surveillance world behind the mock clients.

Everything here is a pure function of ``(seed, video_id, ...)`` so that mock
runs replay byte-for-byte. Media references look like
``synthetic://Arrest002`` for a video, ``synthetic://Arrest002#frames=0-149``
for a subclip and ``synthetic://Arrest002#frame=149`` for a single frame.

The world is tuned to exercise every branch of the pipeline: narrators
occasionally wrap JSON in code fences or emit an invalid item, detectors
return near-duplicate boxes, hits triggered by the reason query carry a
different label, scene-level objects produce oversized boxes, and objects
sometimes drop out of view on the anchor frame.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .scene_gate import ABNORMAL, NORMAL

SCHEME = "synthetic://"
FPS = 30.0
STRIDE = 15

# (label, reason) pairs, by category
ABNORMAL_OBJECTS = {
    "Arrest": [("man", "physically restraining another man"), ("man", "being pinned against the wall"),
               ("police officer", "handcuffing a suspect")],
    "Fighting": [("man", "punching another person"), ("woman", "kicking a man on the ground")],
    "Robbery": [("man", "pointing a gun at the cashier"), ("person", "grabbing cash from the register")],
    "Shoplifting": [("woman", "hiding merchandise in her bag"), ("man", "concealing items under his jacket")],
    "Arson": [("man", "pouring fuel on a doorway"), ("fire", "burning at the entrance")],
    "RoadAccidents": [("car", "crashing into a motorcycle"), ("motorcycle", "sliding across the road")],
}
NORMAL_OBJECTS = [
    ("ladder", "stationary against the wall"), ("car", "parked at the curb"), ("person", "walking along the sidewalk"),
    ("chair", "standing empty near the counter"), ("door", "closed"), ("bicycle", "leaning on a post"),
    ("woman", "standing in line"), ("trash can", "standing by the entrance"), ("table", "holding a few items"),
]
SCENE_OBJECTS = [("wall", "static background"), ("floor", "static surface")]
NORMAL_CATEGORY = "Normal_Videos"
# labels the detector may emit when prompted with a reason string
REASON_LABELS = {"man": "person", "woman": "person", "police officer": "person", "car": "vehicle",
                 "motorcycle": "vehicle", "fire": "smoke"}

_TEMPORAL_SENTENCES = {
    ABNORMAL: ["A man grabs another man and forces him against the wall.",
               "Two people struggle near the entrance.",
               "Someone moves aggressively toward a person."],
    NORMAL: ["People walk through the area.", "The scene remains quiet.", "A person stands near the counter."],
}


def _rng(*parts) -> random.Random:
    return random.Random(":".join(str(p) for p in parts))


def _digest(*parts) -> int:
    return int.from_bytes(hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()[:8], "big")


def _unit(*parts) -> float:
    return _digest(*parts) / 2**64


@dataclass(frozen=True)
class WorldObject:
    label: str
    reason: str
    event: str
    box: tuple[float, float, float, float]
    scene_level: bool = False


@dataclass(frozen=True)
class Scene:
    start: int
    end: int
    abnormal: bool
    objects: tuple[WorldObject, ...]


@dataclass(frozen=True)
class Video:
    video_id: str
    category: str
    label: str
    total_frames: int
    scenes: tuple[Scene, ...]
    anomaly_intervals: tuple[tuple[int, int], ...]

    @property
    def media_ref(self) -> str:
        return SCHEME + self.video_id

    def scene_at(self, frame: int) -> Scene:
        for s in self.scenes:
            if s.start <= frame <= s.end:
                return s
        return self.scenes[-1]

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "media_ref": self.media_ref,
            "total_frames": self.total_frames,
            "fps": FPS,
            "label": self.label,
            "category": self.category,
            "anomaly_intervals": [list(iv) for iv in self.anomaly_intervals],
        }


def category_of(video_id: str) -> str:
    m = re.match(r"([A-Za-z_]+?)_?\d+$", video_id)
    return m.group(1) if m else video_id


def _random_box(rng: random.Random, wmin=0.08, wmax=0.3, hmin=0.15, hmax=0.45) -> tuple[float, float, float, float]:
    w, h = rng.uniform(wmin, wmax), rng.uniform(hmin, hmax)
    x, y = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
    return (round(x, 4), round(y, 4), round(x + w, 4), round(y + h, 4))


def _scene_objects(rng: random.Random, category: str, abnormal: bool) -> tuple[WorldObject, ...]:
    objs: list[WorldObject] = []
    if abnormal:
        pool = ABNORMAL_OBJECTS.get(category) or ABNORMAL_OBJECTS["Fighting"]
        for label, reason in rng.sample(pool, k=min(len(pool), rng.randint(1, 2))):
            objs.append(WorldObject(label, reason, ABNORMAL, _random_box(rng)))
    for label, reason in rng.sample(NORMAL_OBJECTS, k=rng.randint(1, 3)):
        objs.append(WorldObject(label, reason, NORMAL, _random_box(rng)))
    if rng.random() < 0.5:
        label, reason = rng.choice(SCENE_OBJECTS)
        box = (0.0, 0.0, 1.0, 0.62) if label == "wall" else (0.0, 0.4, 1.0, 1.0)
        objs.append(WorldObject(label, reason, NORMAL, box, scene_level=True))
    return tuple(objs)


@lru_cache(maxsize=4096)
def video(seed: int, video_id: str) -> Video:
    """The synthetic ground truth for one video."""
    rng = _rng("video", seed, video_id)
    category = category_of(video_id)
    label = NORMAL if category.startswith("Normal") else ABNORMAL
    n_samples = rng.randint(20, 80)
    total = n_samples * STRIDE + rng.randint(0, STRIDE - 1)
    n_scenes = rng.randint(2, 5)
    cuts = sorted(rng.sample(range(2, n_samples - 1), n_scenes - 1))
    starts = [0] + [c * STRIDE for c in cuts]
    ends = [s - 1 for s in starts[1:]] + [total - 1]
    bad = set()
    if label == ABNORMAL:
        k = rng.randrange(n_scenes)
        bad = {k} | ({k + 1} if k + 1 < n_scenes and rng.random() < 0.4 else set())
    scenes = tuple(
        Scene(s, e, i in bad, _scene_objects(_rng("scene", seed, video_id, i), category, i in bad))
        for i, (s, e) in enumerate(zip(starts, ends))
    )
    intervals = []
    for sc in scenes:
        if sc.abnormal:
            if intervals and intervals[-1][1] + 1 == sc.start:
                intervals[-1] = (intervals[-1][0], sc.end)
            else:
                intervals.append((sc.start, sc.end))
    return Video(video_id, category, label, total, scenes, tuple(intervals))


def parse_ref(ref: str) -> tuple[str, dict]:
    if not ref.startswith(SCHEME):
        raise ValueError(f"not a synthetic media reference: {ref!r}")
    body = ref[len(SCHEME):]
    vid, _, frag = body.partition("#")
    out: dict = {}
    if frag.startswith("frames="):
        a, b = frag[len("frames="):].split("-")
        out["frames"] = (int(a), int(b))
    elif frag.startswith("frame="):
        out["frame"] = int(frag[len("frame="):])
    return vid, out


# -- embedder --------------------------------------------------------------

def _gauss(dim: int, *parts) -> np.ndarray:
    return np.random.default_rng(_digest(*parts)).standard_normal(dim)


def embed_answer(seed: int, image: str, dim: int) -> list[float]:
    """Scene direction plus a little per-frame noise (cosine about 0.98
    within a scene, near 0 across scenes for moderate ``dim``)."""
    vid, frag = parse_ref(image)
    v = video(seed, vid)
    frame = frag.get("frame", 0)
    sc = v.scenes.index(v.scene_at(frame))
    base = _gauss(dim, "scene", seed, vid, sc)
    base /= np.linalg.norm(base)
    noise = _gauss(dim, "frame", seed, vid, frame)
    vec = base + 0.15 * noise / np.linalg.norm(noise)
    return [round(float(x), 8) for x in vec]


# -- narrator --------------------------------------------------------------

def _visible_objects(v: Video, lo: int, hi: int) -> list[WorldObject]:
    # the narrator describes what is on screen at the end of the subclip
    return list(v.scene_at(hi).objects)


def _narration(seed: int, media: str) -> str:
    vid, frag = parse_ref(media)
    v = video(seed, vid)
    lo, hi = frag.get("frames", (0, v.total_frames - 1))
    rng = _rng("narrate", seed, media)
    items = []
    for o in _visible_objects(v, lo, hi):
        items.append({"Event": o.event, "Reason": o.reason, "label": o.label,
                      "confidence": round(rng.uniform(0.6, 0.98), 2)})
    if rng.random() < 0.1:
        items.append({"Event": "Normal", "Reason": "partly visible", "label": "sign", "confidence": 1.4})
    text = json.dumps(items, indent=None)
    r = rng.random()
    if r < 0.2:
        text = f"```json\n{text}\n```"
    elif r < 0.3:
        text = f"Here are the detected objects:\n{text}"
    return text


_BULLET = re.compile(r'^- (?P<label>.+?)(?: at (?P<box>\[\d+, \d+, \d+, \d+\]))?: "(?P<reason>(?:[^"\\]|\\.)*)" \((?P<event>Normal|Abnormal)\)$', re.M)
_LABELED = re.compile(r"The video is labeled: (Normal|Abnormal)")


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def _cot(seed: int, media: str, prompt: str) -> str:
    m = _LABELED.search(prompt)
    label = m.group(1) if m else NORMAL
    rng = _rng("cot", seed, media, hashlib.sha256(prompt.encode()).hexdigest())
    objs = [mm.groupdict() for mm in _BULLET.finditer(prompt)]
    obs = []
    for o in objs[:3]:
        where = f" at {o['box']}" if o["box"] else ""
        reason = o["reason"].replace('\\"', '"')
        obs.append(f"{_article(o['label'])} {o['label']}{where} {reason}")
    if obs:
        observations = "In the video, I observe " + "; ".join(obs) + "."
    else:
        observations = "In the video, I observe an empty scene with no notable activity."
    if label == ABNORMAL:
        analysis = ("The physical interaction between the people involved deviates from routine activity, "
                    "and the surrounding objects do not suggest a benign explanation.")
    else:
        analysis = "All visible objects behave in a routine way and nothing indicates danger or conflict."
    if rng.random() < 0.04:
        # a teacher that forgets the closing line
        return f"Observations: {observations}\n\nAnalysis: {analysis}"
    return f"Observations: {observations}\n\nAnalysis: {analysis}\n\nAnswer: {label}"


def vlm_answer(seed: int, media: str, prompt: str) -> str:
    if "Task 2: Object Detection" in prompt:
        return _narration(seed, media)
    if "Write a chain-of-thought analysis" in prompt:
        return _cot(seed, media, prompt)
    # a plain classification question
    vid, _ = parse_ref(media)
    v = video(seed, vid)
    wrong = _unit("verdict", seed, media) < 0.15
    abnormal = (v.label == ABNORMAL) != wrong
    return "Yes, there is abnormal activity." if abnormal else "No, the video looks normal."


# -- detector --------------------------------------------------------------

def _jitter(box, rng: random.Random, amount: float = 0.01) -> list[float]:
    x1, y1, x2, y2 = (c + rng.uniform(-amount, amount) for c in box)
    x1, y1 = max(0.0, x1), max(0.0, y1)
    x2, y2 = min(1.0, max(x2, x1 + 0.01)), min(1.0, max(y2, y1 + 0.01))
    return [round(x1, 4), round(y1, 4), round(x2, 4), round(y2, 4)]


def _match(a: str, b: str) -> bool:
    a, b = a.strip().lower(), b.strip().lower()
    return bool(a) and bool(b) and (a in b or b in a)


def detector_answer(seed: int, image: str, queries: list[str], box_threshold: float) -> list[dict]:
    vid, frag = parse_ref(image)
    v = video(seed, vid)
    frame = frag.get("frame", v.total_frames - 1)
    sc = v.scene_at(frame)
    rng = _rng("detect", seed, image, "|".join(queries))
    out = []
    for qi, q in enumerate(queries):
        for oi, o in enumerate(sc.objects):
            if qi == 0:
                if not _match(q, o.label):
                    continue
                label = o.label
            else:
                if q != o.reason:
                    continue
                label = REASON_LABELS.get(o.label, o.label) if rng.random() < 0.7 else o.label
            # objects drift out of view on some frames
            if _unit("hidden", seed, vid, sc.start, oi, frame) < 0.2 and not o.scene_level:
                continue
            conf = round(rng.uniform(0.2, 0.95), 3)
            out.append({"label": label, "box": _jitter(o.box, rng), "confidence": conf, "query_index": qi})
            if rng.random() < 0.3:
                out.append({"label": label, "box": _jitter(o.box, rng, 0.005),
                            "confidence": round(conf * rng.uniform(0.7, 0.99), 3), "query_index": qi})
    if rng.random() < 0.05:
        out.append({"label": queries[0], "box": [0.1, 0.1, 0.2, 0.2], "confidence": 1.2, "query_index": 0})
    return [d for d in out if d["confidence"] >= box_threshold or d["confidence"] > 1.0]


# -- corpus -----------------------------------------------------------------

DEFAULT_CATEGORIES = ("Arrest", "Fighting", "Robbery", "Shoplifting", "Arson", "RoadAccidents")


def video_ids(n_videos: int, categories=DEFAULT_CATEGORIES) -> list[str]:
    """Half normal, the rest spread over ``categories``, UCF-Crime style ids."""
    n_normal = n_videos // 2
    ids = [f"{NORMAL_CATEGORY}_{i + 1:03d}" for i in range(n_normal)]
    for i in range(n_videos - n_normal):
        cat = categories[i % len(categories)]
        ids.append(f"{cat}{i // len(categories) + 1:03d}")
    return sorted(ids)


def sentences(seed: int, video_id: str) -> list[dict]:
    v = video(seed, video_id)
    rng = _rng("sentences", seed, video_id)
    out = []
    for sc in v.scenes:
        pool = _TEMPORAL_SENTENCES[ABNORMAL if sc.abnormal else NORMAL]
        out.append({"video_id": video_id, "start_s": round(sc.start / FPS, 3),
                    "end_s": round((sc.end + 1) / FPS, 3), "text": rng.choice(pool)})
    return out


def embeddings(seed: int, video_id: str, dim: int, stride: int = STRIDE) -> list[dict]:
    v = video(seed, video_id)
    rows = []
    for f in range(0, v.total_frames, stride):
        vec = np.asarray(embed_answer(seed, f"{v.media_ref}#frame={f}", dim))
        vec = vec / np.linalg.norm(vec)
        rows.append({"video_id": video_id, "frame_index": f, "embedding": [round(float(x), 10) for x in vec]})
    return rows


def corpus(seed: int, n_videos: int) -> list[Video]:
    return [video(seed, vid) for vid in video_ids(n_videos)]


# -- reference fixtures -------------------------------------------------------

ARREST_NARRATION = json.dumps([
    {"Event": "Abnormal", "Reason": "physically restraining another man", "label": "man", "confidence": 0.93},
    {"Event": "Abnormal", "Reason": "aggressive posture", "label": "man", "confidence": 0.9},
    {"Event": "Normal", "Reason": "stationary against the wall", "label": "ladder", "confidence": 0.85},
    {"Event": "Normal", "Reason": "static surface", "label": "floor", "confidence": 0.8},
    {"Event": "Normal", "Reason": "static background", "label": "wall", "confidence": 0.78},
])

ARREST_COT = (
    "Observations: I observe a man in a white shirt physically restraining another man in a blue shirt, "
    "with the blue-shirted man's bounding box at [456, 559, 634, 849], indicating forceful contact. The "
    "white-shirted man's action is clearly aggressive, as he holds the blue-shirted man in place. A metal "
    "ladder at [661, 131, 804, 455] remains stationary and uninvolved, while the floor and wall show no signs "
    "of disturbance.\n\n"
    "Analysis: The physical restraint between the two men is a clear indicator of violent behavior, which "
    "deviates from normal activity in the scene. The presence of aggressive physical interaction, combined "
    "with the stationary background elements, reinforces that the event is anomalous and potentially "
    "dangerous. No other objects or movements suggest a non-violent context.\n\n"
    "Answer: Abnormal"
)

"""Clients for the three teacher services (narrator/CoT VLM, open-vocabulary
detector, image embedder).

Wire contract, JSON over HTTP POST, media passed by reference::

    POST /generate  {"media": ref, "prompt": str, "decode": {...}}
                 -> {"text": str}
    POST /detect    {"image": ref, "queries": [str, ...], "box_threshold": float}
                 -> {"detections": [{"label": str, "box": [x1, y1, x2, y2],
                                     "confidence": float, "query_index": int}, ...]}
    POST /embed     {"image": ref}
                 -> {"embedding": [float, ...]}

Boxes are normalized ``[0, 1]`` corner coordinates. Every client shares the
retry / in-flight / transcript machinery in :class:`ServiceClient`; the HTTP
and in-process mock backends only differ in ``_send``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import Box, Detection

log = logging.getLogger(__name__)

DEFAULT_DECODE = {"temperature": 0.0, "max_tokens": 512}

ENV_URLS = {"vlm": "GVAD_VLM_URL", "detector": "GVAD_DETECTOR_URL", "embedder": "GVAD_EMBED_URL"}
ENV_TOKEN = "GVAD_API_TOKEN"


class ClientError(RuntimeError):
    pass


class TransportError(ClientError):
    """Retries exhausted on timeouts / connection failures."""


class ProtocolError(ClientError):
    """The service answered, but not with something we accept."""


class DomainError(ValueError):
    pass


class Transient(Exception):
    """Raised by a backend for a retryable failure (timeout, refused connection)."""


@dataclass(frozen=True)
class ServiceEndpoint:
    base_url: str
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    token: str | None = None
    backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_env(cls, service: str, **kw) -> "ServiceEndpoint":
        var = ENV_URLS[service]
        url = os.environ.get(var)
        if not url:
            raise ClientError(f"{var} is not set")
        return cls(url, token=os.environ.get(ENV_TOKEN), **kw)


@dataclass
class GenerateResult:
    text: str
    latency_s: float = 0.0
    retry_count: int = 0


@dataclass(frozen=True)
class DetectorRequest:
    image: str
    queries: tuple[str, ...]
    box_threshold: float = 0.25

    def to_wire(self) -> dict:
        return {"image": self.image, "queries": list(self.queries), "box_threshold": self.box_threshold}


@dataclass
class DetectorResponse:
    detections: list[Detection]
    dropped: int = 0
    retry_count: int = 0


@dataclass
class EmbedResult:
    embedding: np.ndarray
    retry_count: int = 0


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def request_key(service: str, payload: Mapping) -> str:
    return hashlib.sha256(f"{service}|{canonical(payload)}".encode("utf-8")).hexdigest()


class Archive:
    """Request/response transcript.

    Records are buffered and written sorted by request key on ``close`` so
    that concurrent runs produce byte-identical files.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = path
        self._lock = threading.Lock()
        self._records: dict[str, dict] = {}

    def add(self, service: str, request: Mapping, response: Mapping) -> None:
        key = request_key(service, request)
        with self._lock:
            self._records[key] = {"key": key, "service": service, "request": dict(request), "response": dict(response)}

    def records(self) -> list[dict]:
        with self._lock:
            return [self._records[k] for k in sorted(self._records)]

    def close(self) -> None:
        if self.path is None:
            return
        from .datastore import write_jsonl

        write_jsonl(self.path, self.records())


class ServiceClient:
    service = "generic"
    path = "/"

    def __init__(
        self,
        endpoint: ServiceEndpoint,
        archive: Archive | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.archive = archive
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._gauge = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0

    def _send(self, payload: Mapping) -> Mapping:
        raise NotImplementedError

    def _call(self, payload: Mapping) -> tuple[Mapping, int, float]:
        with self._slots:
            with self._gauge:
                self.in_flight += 1
                self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            try:
                retries = 0
                t0 = time.perf_counter()
                while True:
                    try:
                        body = self._send(payload)
                        break
                    except Transient as exc:
                        if retries >= self.endpoint.max_retries:
                            raise TransportError(
                                f"{self.service}: gave up after {retries + 1} attempts: {exc}"
                            ) from exc
                        self._sleep(self.endpoint.backoff * (2**retries))
                        retries += 1
                latency = time.perf_counter() - t0
            finally:
                with self._gauge:
                    self.in_flight -= 1
        if not isinstance(body, Mapping):
            raise ProtocolError(f"{self.service}: response body is not a JSON object")
        if self.archive is not None:
            self.archive.add(self.service, payload, body)
        return body, retries, latency


class VLMClient(ServiceClient):
    service = "vlm"
    path = "/generate"

    def generate(self, media_ref: str, prompt: str, decode: Mapping | None = None) -> GenerateResult:
        params = dict(DEFAULT_DECODE)
        params.update(decode or {})
        body, retries, latency = self._call({"media": media_ref, "prompt": prompt, "decode": params})
        text = body.get("text")
        if not isinstance(text, str):
            raise ProtocolError("vlm: response lacks a text field")
        return GenerateResult(text, latency, retries)


class DetectorClient(ServiceClient):
    service = "detector"
    path = "/detect"

    def detect(self, request: DetectorRequest) -> DetectorResponse:
        body, retries, _ = self._call(request.to_wire())
        raw = body.get("detections")
        if not isinstance(raw, list):
            raise ProtocolError("detector: response lacks a detections list")
        dets: list[Detection] = []
        dropped = 0
        for item in raw:
            try:
                q = item.get("query_index")
                query = request.queries[q] if isinstance(q, int) and 0 <= q < len(request.queries) else None
                det = Detection(
                    label=str(item["label"]).strip().lower(),
                    box=Box.of(item["box"]),
                    confidence=float(item["confidence"]),
                    query=query,
                )
                if det.confidence < request.box_threshold:
                    raise ValueError("confidence below box threshold")
            except (ValueError, TypeError, KeyError, AttributeError) as exc:
                dropped += 1
                log.debug("dropping detection %r: %s", item, exc)
                continue
            dets.append(det)
        if dropped:
            log.info("detector: dropped %d invalid detections for %s", dropped, request.image)
        return DetectorResponse(dets, dropped, retries)


class EmbedClient(ServiceClient):
    service = "embedder"
    path = "/embed"

    def __init__(self, endpoint: ServiceEndpoint, dim: int | None = None, **kw):
        super().__init__(endpoint, **kw)
        self.dim = dim

    def embed(self, image_ref: str) -> EmbedResult:
        body, retries, _ = self._call({"image": image_ref})
        try:
            vec = np.asarray(body["embedding"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"embedder: bad embedding payload: {exc}") from None
        if vec.ndim != 1:
            raise ProtocolError("embedder: embedding is not a vector")
        if self.dim is not None and vec.shape[0] != self.dim:
            raise ProtocolError(f"embedder: dimension {vec.shape[0]} != configured {self.dim}")
        norm = float(np.linalg.norm(vec))
        if norm == 0.0 or not np.isfinite(norm):
            raise DomainError("embedder returned a zero (or non-finite) vector")
        return EmbedResult(vec / norm, retries)


# -- HTTP backend -----------------------------------------------------------

def requests_transport(url: str, payload: Mapping, headers: Mapping, timeout: float) -> tuple[int, str]:
    import requests

    try:
        r = requests.post(url, json=payload, headers=dict(headers), timeout=timeout)
    except (requests.Timeout, requests.ConnectionError) as exc:
        raise Transient(str(exc)) from exc
    return r.status_code, r.text


class _HTTPMixin:
    transport: Callable = staticmethod(requests_transport)

    def _send(self, payload: Mapping) -> Mapping:
        ep = self.endpoint
        headers = {"Content-Type": "application/json"}
        if ep.token:
            headers["Authorization"] = f"Bearer {ep.token}"
        url = ep.base_url.rstrip("/") + self.path
        status, text = self.transport(url, payload, headers, ep.timeout)
        if not 200 <= status < 300:
            raise ProtocolError(f"{self.service}: HTTP {status}: {text[:200]}")
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"{self.service}: non-JSON body: {text[:200]}") from exc


class HTTPVLMClient(_HTTPMixin, VLMClient):
    pass


class HTTPDetectorClient(_HTTPMixin, DetectorClient):
    pass


class HTTPEmbedClient(_HTTPMixin, EmbedClient):
    pass


@dataclass
class ClientSuite:
    vlm: VLMClient
    detector: DetectorClient
    embedder: EmbedClient
    archive: Archive | None = None


def http_suite(archive: Archive | None = None, embed_dim: int | None = None, **endpoint_kw) -> ClientSuite:
    return ClientSuite(
        vlm=HTTPVLMClient(ServiceEndpoint.from_env("vlm", **endpoint_kw), archive=archive),
        detector=HTTPDetectorClient(ServiceEndpoint.from_env("detector", **endpoint_kw), archive=archive),
        embedder=HTTPEmbedClient(ServiceEndpoint.from_env("embedder", **endpoint_kw), dim=embed_dim, archive=archive),
        archive=archive,
    )


# -- in-process mocks ------------------------------------------------------

class _MockBackend:
    """Failure schedule and latency shared by all mock clients.

    ``failures`` is consumed one entry per attempt: ``"timeout"`` raises a
    retryable failure, ``"error"`` a protocol error, anything else passes.
    """

    def _init_mock(self, latency_s: float = 0.0, failures: Sequence[str] = ()):
        self.latency_s = latency_s
        self._failures = list(failures)
        self._flock = threading.Lock()
        self.calls = 0

    def _maybe_fail(self) -> None:
        with self._flock:
            self.calls += 1
            kind = self._failures.pop(0) if self._failures else None
        if self.latency_s:
            time.sleep(self.latency_s)
        if kind == "timeout":
            raise Transient("injected timeout")
        if kind == "error":
            raise ProtocolError(f"{self.service}: HTTP 500: injected failure")


def _mock_endpoint(max_in_flight: int = 4, max_retries: int = 3) -> ServiceEndpoint:
    return ServiceEndpoint("mock://", timeout=1.0, max_retries=max_retries, max_in_flight=max_in_flight, backoff=0.0)


class MockVLM(_MockBackend, VLMClient):
    """Answers narration and CoT prompts from the synthetic world.

    ``fixtures`` maps a media reference to a canned response and takes
    precedence over the synthetic answer.
    """

    def __init__(self, seed: int = 0, fixtures: Mapping[str, str] | None = None,
                 latency_s: float = 0.0, failures: Sequence[str] = (), endpoint: ServiceEndpoint | None = None,
                 archive: Archive | None = None, respond: Callable[[Mapping], str] | None = None):
        super().__init__(endpoint or _mock_endpoint(), archive=archive, sleep=lambda s: None)
        self._init_mock(latency_s, failures)
        self.seed = seed
        self.fixtures = dict(fixtures or {})
        self.respond = respond

    def _send(self, payload: Mapping) -> Mapping:
        self._maybe_fail()
        if self.respond is not None:
            return {"text": self.respond(payload)}
        media = payload["media"]
        if media in self.fixtures:
            return {"text": self.fixtures[media]}
        from . import synthetic

        return {"text": synthetic.vlm_answer(self.seed, media, payload["prompt"])}


class MockDetector(_MockBackend, DetectorClient):
    def __init__(self, seed: int = 0, fixtures: Mapping[str, list] | None = None,
                 latency_s: float = 0.0, failures: Sequence[str] = (), endpoint: ServiceEndpoint | None = None,
                 archive: Archive | None = None, fail_images: Sequence[str] = ()):
        super().__init__(endpoint or _mock_endpoint(), archive=archive, sleep=lambda s: None)
        self._init_mock(latency_s, failures)
        self.seed = seed
        self.fixtures = dict(fixtures or {})
        self.fail_images = set(fail_images)

    def _send(self, payload: Mapping) -> Mapping:
        self._maybe_fail()
        image = payload["image"]
        if image in self.fail_images:
            raise ProtocolError(f"detector: HTTP 500: cannot decode {image}")
        if image in self.fixtures:
            return {"detections": list(self.fixtures[image])}
        from . import synthetic

        return {"detections": synthetic.detector_answer(
            self.seed, image, list(payload["queries"]), float(payload["box_threshold"]))}


class MockEmbedder(_MockBackend, EmbedClient):
    def __init__(self, seed: int = 0, dim: int = 64, fixtures: Mapping[str, Sequence[float]] | None = None,
                 latency_s: float = 0.0, failures: Sequence[str] = (), endpoint: ServiceEndpoint | None = None,
                 archive: Archive | None = None):
        super().__init__(endpoint or _mock_endpoint(), dim=dim, archive=archive, sleep=lambda s: None)
        self._init_mock(latency_s, failures)
        self.seed = seed
        self.fixtures = dict(fixtures or {})

    def _send(self, payload: Mapping) -> Mapping:
        self._maybe_fail()
        image = payload["image"]
        if image in self.fixtures:
            return {"embedding": list(self.fixtures[image])}
        from . import synthetic

        return {"embedding": synthetic.embed_answer(self.seed, image, self.dim)}


def mock_suite(seed: int = 0, archive: Archive | None = None, embed_dim: int = 64, max_in_flight: int = 4,
               vlm_fixtures: Mapping[str, str] | None = None,
               detector_fixtures: Mapping[str, list] | None = None) -> ClientSuite:
    ep = _mock_endpoint(max_in_flight)
    return ClientSuite(
        vlm=MockVLM(seed, fixtures=vlm_fixtures, endpoint=ep, archive=archive),
        detector=MockDetector(seed, fixtures=detector_fixtures, endpoint=ep, archive=archive),
        embedder=MockEmbedder(seed, dim=embed_dim, endpoint=ep, archive=archive),
        archive=archive,
    )


# -- replay ----------------------------------------------------------------

class _ReplayBackend:
    def _init_replay(self, table: Mapping[str, Mapping]):
        self._table = table

    def _send(self, payload: Mapping) -> Mapping:
        key = request_key(self.service, payload)
        try:
            return self._table[key]
        except KeyError:
            raise ProtocolError(f"{self.service}: request not present in transcript") from None


class ReplayVLM(_ReplayBackend, VLMClient):
    pass


class ReplayDetector(_ReplayBackend, DetectorClient):
    pass


class ReplayEmbedder(_ReplayBackend, EmbedClient):
    pass


def replay_suite(records: Sequence[Mapping]) -> ClientSuite:
    """Clients that answer only from a recorded transcript."""
    tables: dict[str, dict] = {"vlm": {}, "detector": {}, "embedder": {}}
    for r in records:
        tables[r["service"]][r["key"]] = r["response"]
    ep = _mock_endpoint()
    vlm, det, emb = ReplayVLM(ep), ReplayDetector(ep), ReplayEmbedder(ep)
    vlm._init_replay(tables["vlm"])
    det._init_replay(tables["detector"])
    emb._init_replay(tables["embedder"])
    return ClientSuite(vlm, det, emb)

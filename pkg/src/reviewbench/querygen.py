"""Complex-query synthesis: pick satisfied long reviews, rewrite them as first-person needs via a
chat-completion endpoint, and keep the rewrites that pass validation.

All HTTP goes through an ``httpx`` transport, so a live endpoint, the
in-process :class:`MockChatTransport`, or a :class:`ReplayTransport` over a
recorded transcript can be swapped without touching the pipeline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import numpy as np

from reviewbench.corpus import ItemMeta, Review
from reviewbench.pipeline import TEST, SplitBoundaries, assign_split

logger = logging.getLogger(__name__)

PROMPT_VERSION = "first-person-need/v1"
SYSTEM_PROMPT = (
    "You rewrite product reviews into search requests. Write in the first person, as a shopper "
    "describing what they need and why, in two to four sentences. Do not name the product, its "
    "brand, or its title. Output only the request."
)
USER_TEMPLATE = "Review:\n<<<\n{review}\n>>>\nRewrite this review as the shopper's request."
PROMPT_HASH = hashlib.sha256(f"{PROMPT_VERSION}\n{SYSTEM_PROMPT}\n{USER_TEMPLATE}".encode()).hexdigest()[:16]

MIN_QUERY_CHARS = 40
MIN_REVIEW_CHARS = 100
TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass
class EndpointConfig:
    base_url: str = "http://127.0.0.1:8000/v1"
    model: str = "gpt-3.5-turbo"
    token_env: str = "OPENAI_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    max_concurrency: int = 4
    rate_per_minute: int = 60
    window_seconds: float = 60.0
    backoff_base: float = 1.0
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.rate_per_minute < 1:
            raise ValueError("rate_per_minute must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EndpointConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown endpoint config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SynthesizedQuery:
    query: str
    review_id: str
    item_id: str
    domain: str
    status: str = "ok"
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_record(self, qid: str, prompt_hash: str = PROMPT_HASH) -> dict:
        return {"qid": qid, "query": self.query, "item_id": self.item_id, "ori_rating": 5,
                "domain": self.domain, "prompt_hash": prompt_hash}


def review_id(review: Review) -> str:
    return f"{review.domain}/{review.user_id}/{review.item_id}/{review.timestamp}"


def is_eligible(review: Review) -> bool:
    return review.rating == 5.0 and len(review.text) >= MIN_REVIEW_CHARS


def select_sources(reviews: Iterable[Review], n: int, seed: int = 0,
                   boundaries: SplitBoundaries | None = None) -> list[Review]:
    """Uniformly sample up to ``n`` five-star reviews with at least 100 characters of text.

    With ``boundaries`` only test-split reviews are considered. The sample
    keeps input order.
    """
    eligible = [r for r in reviews
                if is_eligible(r) and (boundaries is None or assign_split(r, boundaries) == TEST)]
    if n >= len(eligible):
        return eligible
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(eligible), size=n, replace=False))
    return [eligible[i] for i in picks]


def validate_query(q: SynthesizedQuery | str, meta: ItemMeta) -> tuple[bool, str | None]:
    text = q.query if isinstance(q, SynthesizedQuery) else q
    text = text.strip()
    if not text:
        return False, "empty"
    if len(text) < MIN_QUERY_CHARS:
        return False, "too_short"
    title = meta.title.strip().lower()
    if title and title in text.lower():
        return False, "leak"
    return True, None


def build_messages(review: Review) -> list[dict]:
    body = f"{review.title.strip()}\n{review.text.strip()}".strip()
    return [{"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": USER_TEMPLATE.format(review=body)}]


# ---------------------------------------------------------------------------
# transport plumbing


class SlidingWindowLimiter:
    """Blocks until fewer than ``rate`` calls were made in the trailing ``window`` seconds."""

    def __init__(self, rate: int, window: float = 60.0, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = rate
        self.window = window
        self.clock = clock
        self.sleep = sleep
        self._calls: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        while True:
            with self._lock:
                now = self.clock()
                while self._calls and self._calls[0] <= now - self.window:
                    self._calls.popleft()
                if len(self._calls) < self.rate:
                    self._calls.append(now)
                    return now
                wait = self._calls[0] + self.window - now
            self.sleep(max(wait, 1e-3))


class EndpointError(RuntimeError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def request_key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode()).hexdigest()


class ChatClient:
    """Chat-completion POST client with retries, exponential backoff and a rate cap."""

    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.sleep = sleep
        self.limiter = SlidingWindowLimiter(config.rate_per_minute, config.window_seconds, clock, sleep)
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(config.token_env) if config.token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(base_url=config.base_url.rstrip("/") + "/", headers=headers,
                                  timeout=config.timeout, transport=transport)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def complete(self, messages: list[dict]) -> str:
        payload = {"model": self.config.model, "messages": messages, "temperature": self.config.temperature}
        last = ""
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self.config.backoff_base * 2 ** (attempt - 1))
            self.limiter.acquire()
            try:
                resp = self._http.post("chat/completions", json=payload)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code in TRANSIENT_STATUS:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise EndpointError("http", f"HTTP {resp.status_code}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise EndpointError("malformed", str(exc)) from exc
        raise EndpointError("transport", last)


def _chat_response(content: str, status: int = 200) -> httpx.Response:
    body = {"object": "chat.completion", "choices": [{"index": 0, "finish_reason": "stop",
                                                       "message": {"role": "assistant", "content": content}}]}
    return httpx.Response(status, json=body)


_REVIEW_RE = re.compile(r"<<<\n(.*?)\n>>>", re.S)


def first_person_rewrite(review_text: str) -> str:
    """Deterministic stand-in for an LLM rewrite, used by the mock endpoint."""
    words = re.findall(r"[^\W_]+", review_text.lower())
    core = " ".join(words[:40])
    return f"I am looking for something for myself and I want it to be like this: {core}. It has to work well for me."


class MockChatTransport(httpx.BaseTransport):
    """In-process chat-completion endpoint.

    ``responder(payload) -> str | int`` returns the assistant text, or an int
    HTTP status to simulate a failure. ``failures`` is a queue of statuses
    returned before any successful response. Request times are logged.
    """

    def __init__(self, responder: Callable[[dict], str | int] | None = None, failures: Sequence[int] = (),
                 clock: Callable[[], float] = time.monotonic):
        self.responder = responder or self._default
        self.failures = deque(failures)
        self.clock = clock
        self.request_times: list[float] = []
        self.headers: list[dict] = []
        self._lock = threading.Lock()

    @staticmethod
    def _default(payload: dict) -> str:
        user = payload["messages"][-1]["content"]
        m = _REVIEW_RE.search(user)
        return first_person_rewrite(m.group(1) if m else user)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        with self._lock:
            self.request_times.append(self.clock())
            self.headers.append(dict(request.headers))
            if self.failures:
                return httpx.Response(self.failures.popleft(), json={"error": "injected"})
        out = self.responder(json.loads(request.content))
        if isinstance(out, int):
            return httpx.Response(out, json={"error": "mock"})
        return _chat_response(out)


class RecordingTransport(httpx.BaseTransport):
    """Wraps a transport and keeps every exchange for :meth:`save`."""

    def __init__(self, inner: httpx.BaseTransport):
        self.inner = inner
        self.exchanges: list[dict] = []
        self._lock = threading.Lock()

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        payload = json.loads(request.content)
        resp = self.inner.handle_request(request)
        resp.read()
        with self._lock:
            self.exchanges.append({"key": request_key(payload), "request": payload,
                                   "status": resp.status_code, "response": resp.json()})
        return httpx.Response(resp.status_code, content=resp.content, headers=resp.headers)

    def save(self, path) -> None:
        # completion order varies across threads; key order does not
        rows = sorted(self.exchanges, key=lambda e: (e["key"], e["status"] == 200))
        with open(path, "w", encoding="utf-8") as fh:
            for e in rows:
                fh.write(json.dumps(e, sort_keys=True, ensure_ascii=False) + "\n")


class ReplayTransport(httpx.BaseTransport):
    """Serves recorded responses keyed by request payload; unknown requests get HTTP 404."""

    def __init__(self, path):
        self._responses: dict[str, deque] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    e = json.loads(line)
                    self._responses.setdefault(e["key"], deque()).append((e["status"], e["response"]))
        self._lock = threading.Lock()
        self.request_times: list[float] = []

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        key = request_key(json.loads(request.content))
        with self._lock:
            self.request_times.append(time.monotonic())
            queue = self._responses.get(key)
            if not queue:
                return httpx.Response(404, json={"error": "request not in transcript"})
            status, body = queue.popleft() if len(queue) > 1 else queue[0]
        return httpx.Response(status, json=body)


# ---------------------------------------------------------------------------
# synthesis


def synthesize_query(review: Review, meta: ItemMeta, client: ChatClient) -> SynthesizedQuery:
    rid = review_id(review)
    try:
        text = client.complete(build_messages(review)).strip()
    except EndpointError as exc:
        return SynthesizedQuery("", rid, review.item_id, review.domain, "failed", exc.reason)
    ok, reason = validate_query(text, meta)
    if not ok:
        return SynthesizedQuery(text, rid, review.item_id, review.domain, "failed", reason)
    return SynthesizedQuery(text, rid, review.item_id, review.domain)


def generate_queries(reviews: Sequence[Review], metadata: Mapping[str, ItemMeta], client: ChatClient,
                     max_concurrency: int | None = None) -> list[SynthesizedQuery]:
    """Synthesize a query per review with bounded concurrency; results are ordered by review id.

    Reviews whose item has no metadata are reported as ``failed(no_metadata)``.
    """
    workers = max_concurrency or client.config.max_concurrency

    def one(r: Review) -> SynthesizedQuery:
        meta = metadata.get(r.item_id)
        if meta is None:
            return SynthesizedQuery("", review_id(r), r.item_id, r.domain, "failed", "no_metadata")
        return synthesize_query(r, meta, client)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, reviews))
    return sorted(results, key=lambda q: q.review_id)


def query_records(queries: Iterable[SynthesizedQuery], prompt_hash: str = PROMPT_HASH) -> list[dict]:
    """Output rows for the ok queries, numbered in order."""
    return [q.to_record(f"c4-{n:06d}", prompt_hash) for n, q in enumerate(q for q in queries if q.ok)]

"""Review and item-metadata records, streaming JSONL ingestion, and corpus statistics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Literal

logger = logging.getLogger(__name__)

Kind = Literal["reviews", "metadata"]

ITEM_KEYS = ("parent_asin", "asin")


class DataError(ValueError):
    """Input data violates a record contract."""


@dataclass(frozen=True)
class Review:
    user_id: str
    item_id: str
    rating: float
    title: str
    text: str
    timestamp: int
    domain: str
    verified: bool | None = None

    def __post_init__(self):
        if not self.user_id:
            raise DataError("empty user_id")
        if not self.item_id:
            raise DataError("empty item_id")
        if not (1.0 <= self.rating <= 5.0):
            raise DataError(f"rating {self.rating} outside [1, 5]")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    domain: str
    title: str = ""
    features: tuple[str, ...] = ()
    description: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.item_id:
            raise DataError("empty item_id")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        d["description"] = list(self.description)
        return d


@dataclass(frozen=True)
class CorpusStats:
    n_reviews: int = 0
    n_users: int = 0
    n_items: int = 0
    n_meta: int = 0
    min_time: int = 0
    max_time: int = 0
    approx_tokens: int = 0
    approx_meta_tokens: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _item_key(obj: dict, key: str) -> str:
    value = obj.get(key)
    if value is None:
        for alt in ITEM_KEYS:
            if alt != key and obj.get(alt) is not None:
                value = obj[alt]
                break
    if not isinstance(value, str):
        raise KeyError(key)
    return value


def _text_list(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,)
    return tuple(str(v) for v in value)


def parse_review(obj: dict, domain: str, key: str = "parent_asin") -> Review:
    rating = obj["rating"]
    timestamp = obj["timestamp"]
    if isinstance(rating, bool) or not isinstance(rating, (int, float)) or not math.isfinite(rating):
        raise DataError("rating is not a finite number")
    if isinstance(timestamp, bool) or not isinstance(timestamp, int):
        raise DataError("timestamp is not an integer")
    user_id = obj["user_id"]
    text = obj["text"]
    if not isinstance(user_id, str) or not isinstance(text, str):
        raise DataError("user_id and text must be strings")
    title = obj.get("title") or ""
    verified = obj.get("verified_purchase", obj.get("verified"))
    return Review(
        user_id=user_id,
        item_id=_item_key(obj, key),
        rating=float(rating),
        title=str(title),
        text=text,
        timestamp=timestamp,
        domain=domain,
        verified=verified if isinstance(verified, bool) else None,
    )


def parse_meta(obj: dict, domain: str, key: str = "parent_asin") -> ItemMeta:
    return ItemMeta(
        item_id=_item_key(obj, key),
        domain=domain,
        title=str(obj.get("title") or ""),
        features=_text_list(obj.get("features")),
        description=_text_list(obj.get("description")),
    )


class RecordStream:
    """Lazy, re-iterable stream of records parsed from one JSONL file.

    Each pass re-reads the file line by line, so memory stays flat. Lines that
    fail to parse or miss a required field are skipped; ``skipped`` holds the
    count from the most recent completed or in-progress pass.
    """

    def __init__(self, path, kind: Kind, domain: str | None = None, key: str = "parent_asin",
                 domains: Iterable[str] | None = None):
        self.path = Path(path)
        if kind not in ("reviews", "metadata"):
            raise ValueError(f"unknown kind {kind!r}")
        self.kind = kind
        if domain is None:
            domain = self.path.name.split(".")[0]
            if kind == "metadata" and domain.startswith("meta_"):
                domain = domain[len("meta_"):]
        self.domain = domain
        if domains is not None and self.domain not in set(domains):
            raise DataError(f"domain {self.domain!r} is not a configured category")
        self.key = key
        self.skipped = 0
        self.read = 0
        # fail fast on unreadable paths
        with open(self.path, "rb"):
            pass

    def __iter__(self) -> Iterator[Review | ItemMeta]:
        parse = parse_review if self.kind == "reviews" else parse_meta
        self.skipped = 0
        self.read = 0
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    if not isinstance(obj, dict):
                        raise DataError("line is not a JSON object")
                    record = parse(obj, self.domain, self.key)
                except (ValueError, KeyError, TypeError) as exc:
                    self.skipped += 1
                    logger.debug("%s:%d skipped (%s)", self.path, lineno, exc)
                    continue
                self.read += 1
                yield record
        if self.skipped:
            logger.warning("%s: skipped %d malformed line(s)", self.path, self.skipped)


def ingest(path, kind: Kind, domain: str | None = None, key: str = "parent_asin",
           domains: Iterable[str] | None = None) -> RecordStream:
    """Open a reviews or metadata JSONL file as a lazy record stream.

    The domain tag defaults to the file name up to its first dot, minus a
    ``meta_`` prefix for metadata (``meta_Video_Games.jsonl`` -> ``Video_Games``).
    """
    return RecordStream(path, kind, domain=domain, key=key, domains=domains)


def _whitespace_tokens(*texts: str) -> int:
    return sum(len(t.split()) for t in texts)


def compute_stats(reviews: Iterable[Review], metadata: Iterable[ItemMeta] = ()) -> CorpusStats:
    users: set[str] = set()
    items: set[str] = set()
    n_reviews = 0
    tokens = 0
    lo = hi = None
    for r in reviews:
        n_reviews += 1
        users.add(r.user_id)
        items.add(r.item_id)
        tokens += _whitespace_tokens(r.title, r.text)
        lo = r.timestamp if lo is None else min(lo, r.timestamp)
        hi = r.timestamp if hi is None else max(hi, r.timestamp)
    n_meta = 0
    meta_tokens = 0
    for m in metadata:
        n_meta += 1
        meta_tokens += _whitespace_tokens(m.title, *m.features, *m.description)
    return CorpusStats(
        n_reviews=n_reviews,
        n_users=len(users),
        n_items=len(items),
        n_meta=n_meta,
        min_time=lo if lo is not None else 0,
        max_time=hi if hi is not None else 0,
        approx_tokens=tokens,
        approx_meta_tokens=meta_tokens,
    )


def write_jsonl(path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)

"""Temporal splitting, training-pair construction, downsampling and interaction sequences."""

from __future__ import annotations

import bisect
import itertools
from collections import defaultdict
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from reviewbench.corpus import DataError, ItemMeta, Review

TRAIN, VALID, TEST = "train", "valid", "test"
SPLITS = (TRAIN, VALID, TEST)


class UnsplittableCorpus(DataError):
    pass


@dataclass(frozen=True)
class SplitBoundaries:
    """Two cut timestamps: train is ``t < t1``, valid ``t1 <= t < t2``, test ``t >= t2``."""

    t1: int
    t2: int
    counts: tuple[int, int, int] = (0, 0, 0)
    deviation: float = 0.0

    def __post_init__(self):
        if self.t1 > self.t2:
            raise ValueError(f"t1={self.t1} > t2={self.t2}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = list(self.counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitBoundaries":
        return cls(int(d["t1"]), int(d["t2"]), tuple(d.get("counts", (0, 0, 0))), float(d.get("deviation", 0.0)))


def parse_ratio(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(":")]
    if len(parts) != 3:
        raise ValueError(f"ratio must have three parts, got {text!r}")
    return tuple(parts)


def _targets(n: int, ratio: Sequence[float]) -> tuple[Fraction, Fraction, Fraction]:
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ValueError(f"ratio components must be three positive numbers, got {ratio!r}")
    rs = [Fraction(r) for r in ratio]
    total = sum(rs)
    return tuple(n * r / total for r in rs)


def _candidates(timestamps: Sequence[int]) -> tuple[list[int], list[int]]:
    """Candidate cut values (distinct timestamps plus max+1) and the train-side count for each."""
    ts = sorted(timestamps)
    values = sorted(set(ts))
    values.append(values[-1] + 1)
    counts = [bisect.bisect_left(ts, v) for v in values]
    return values, counts


def _deviation(i: int, j: int, n: int, target) -> Fraction:
    return abs(i - target[0]) + abs(j - i - target[1]) + abs(n - j - target[2])


def find_split_boundaries(timestamps: Iterable[int], ratio: Sequence[float] = (8, 1, 1)) -> SplitBoundaries:
    """Choose two cut timestamps whose split counts best match ``ratio``.

    Cuts are restricted to observed timestamps (plus one past the maximum).
    The objective is the L1 distance between realized and target counts,
    evaluated exactly with rationals; ties go to the smaller t1, then the
    smaller t2. Runs in O(n log n).
    """
    ts = list(timestamps)
    if len(ts) < 3:
        raise UnsplittableCorpus(f"need at least 3 timestamps, got {len(ts)}")
    n = len(ts)
    target = _targets(n, ratio)
    values, counts = _candidates(ts)
    best = None
    for a, i in enumerate(counts):
        # for fixed i the objective is convex piecewise-linear in j, flat on [lo, hi]
        lo, hi = sorted((i + target[1], n - target[2]))
        k = bisect.bisect_left(counts, lo, lo=a)
        options = []
        if k < len(counts):
            options.append(k)
        if k > a:
            options.append(k - 1)
        for b in options:
            dev = _deviation(i, counts[b], n, target)
            key = (dev, values[a], values[b])
            if best is None or key < best[0]:
                best = (key, a, b)
    (dev, t1, t2), a, b = best
    i, j = counts[a], counts[b]
    return SplitBoundaries(t1, t2, (i, j - i, n - j), float(dev))


def find_split_boundaries_exhaustive(timestamps: Iterable[int], ratio: Sequence[float] = (8, 1, 1)) -> SplitBoundaries:
    """Brute-force reference for :func:`find_split_boundaries` (O(m^2) pairs, counts recomputed)."""
    ts = list(timestamps)
    if len(ts) < 3:
        raise UnsplittableCorpus(f"need at least 3 timestamps, got {len(ts)}")
    n = len(ts)
    target = _targets(n, ratio)
    values = sorted(set(ts)) + [max(ts) + 1]
    best = None
    for t1, t2 in itertools.combinations_with_replacement(values, 2):
        tr = sum(1 for t in ts if t < t1)
        va = sum(1 for t in ts if t1 <= t < t2)
        dev = abs(tr - target[0]) + abs(va - target[1]) + abs(n - tr - va - target[2])
        key = (dev, t1, t2)
        if best is None or key < best[0]:
            best = (key, (tr, va, n - tr - va))
    (dev, t1, t2), c = best
    return SplitBoundaries(t1, t2, c, float(dev))


def find_split_boundaries_by_domain(reviews: Iterable[Review], ratio: Sequence[float] = (8, 1, 1)) -> dict[str, SplitBoundaries]:
    by_domain: dict[str, list[int]] = defaultdict(list)
    for r in reviews:
        by_domain[r.domain].append(r.timestamp)
    return {d: find_split_boundaries(ts, ratio) for d, ts in sorted(by_domain.items())}


def split_label(timestamp: int, b: SplitBoundaries) -> str:
    if timestamp < b.t1:
        return TRAIN
    if timestamp < b.t2:
        return VALID
    return TEST


def assign_split(review: Review, b: SplitBoundaries) -> str:
    return split_label(review.timestamp, b)


class TemporalSplitter(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on timestamps learns the cuts, ``transform`` labels timestamps.

    >>> TemporalSplitter().fit(range(1, 11)).boundaries_.t1
    9
    """

    def __init__(self, ratio=(8, 1, 1)):
        self.ratio = ratio

    def fit(self, X, y=None):
        ts = np.asarray(X).ravel()
        if ts.size and not np.issubdtype(ts.dtype, np.integer):
            raise ValueError("timestamps must be integers")
        self.boundaries_ = find_split_boundaries([int(t) for t in ts], self.ratio)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "boundaries_")
        ts = np.asarray(X).ravel()
        return np.array([split_label(int(t), self.boundaries_) for t in ts], dtype=object)


@dataclass(frozen=True)
class TrainingPair:
    context: str
    metadata: str
    item_id: str
    domain: str
    timestamp: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingPair":
        return cls(d["context"], d["metadata"], d["item_id"], d["domain"], int(d["timestamp"]))


def _join(*parts: str) -> str:
    return " ".join(p for p in (s.strip() for s in parts) if p)


def context_text(review: Review) -> str:
    return _join(review.title, review.text)


def metadata_text(meta: ItemMeta) -> str:
    """Flatten title, features and description into one sentence."""
    return _join(meta.title, " ".join(meta.features), " ".join(meta.description))


def build_pair(review: Review, meta: ItemMeta, min_chars: int = 30) -> TrainingPair | None:
    """Pair a review with its item's metadata; ``None`` if either side is under ``min_chars``."""
    if review.item_id != meta.item_id:
        raise ValueError(f"item mismatch: review {review.item_id!r} vs metadata {meta.item_id!r}")
    context = context_text(review)
    metadata = metadata_text(meta)
    # len() counts code points, not bytes
    if len(context) < min_chars or len(metadata) < min_chars:
        return None
    return TrainingPair(context, metadata, review.item_id, review.domain, review.timestamp)


def build_pairs(reviews: Iterable[Review], metadata: dict[str, ItemMeta], boundaries: SplitBoundaries | None = None,
                split: str = TRAIN, min_chars: int = 30) -> Iterator[TrainingPair]:
    """Stream pairs for reviews of one split whose item has metadata."""
    for r in reviews:
        if boundaries is not None and assign_split(r, boundaries) != split:
            continue
        meta = metadata.get(r.item_id)
        if meta is None:
            continue
        pair = build_pair(r, meta, min_chars)
        if pair is not None:
            yield pair


def downsample(pairs: Iterable, fraction: float = 0.1, seed: int = 0) -> Iterator:
    """Keep each element independently with probability ``fraction``."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        yield from pairs
        return
    rng = np.random.default_rng(seed)
    for p in pairs:
        if rng.random() < fraction:
            yield p


@dataclass(frozen=True)
class SequenceExample:
    user_id: str
    history: tuple[str, ...]
    history_times: tuple[int, ...]
    target: str
    target_time: int
    split: str
    domain: str = ""

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "history": list(self.history), "target": self.target,
                "split": self.split, "domain": self.domain}

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceExample":
        hist = tuple(d["history"])
        return cls(d["user_id"], hist, tuple(d.get("history_times", [0] * len(hist))), d["target"],
                   int(d.get("target_time", 0)), d["split"], d.get("domain", ""))


def build_sequences(reviews: Iterable[Review], boundaries: SplitBoundaries | None = None,
                    max_len: int = 50) -> list[SequenceExample]:
    """One example per (user, target interaction) with up to ``max_len`` preceding items.

    Interactions are ordered by (timestamp, item_id). Without boundaries every
    example is labelled train.
    """
    by_user: dict[str, list[tuple[int, str, str]]] = defaultdict(list)
    for r in reviews:
        by_user[r.user_id].append((r.timestamp, r.item_id, r.domain))
    out = []
    for user in sorted(by_user):
        events = sorted(by_user[user])
        for k in range(1, len(events)):
            past = events[max(0, k - max_len):k]
            t, item, domain = events[k]
            label = split_label(t, boundaries) if boundaries is not None else TRAIN
            out.append(SequenceExample(
                user_id=user,
                history=tuple(e[1] for e in past),
                history_times=tuple(e[0] for e in past),
                target=item,
                target_time=t,
                split=label,
                domain=domain,
            ))
    return out

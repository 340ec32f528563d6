"""Sparse (BM25) and exact dense retrievers plus candidate-pool sampling."""

from __future__ import annotations

import bisect
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from reviewbench.encoder import EmbeddingStore, tokenize


@dataclass(frozen=True)
class RankedList:
    items: tuple[str, ...] = ()
    scores: tuple[float, ...] = ()

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(zip(self.items, self.scores))

    def rank_of(self, item_id: str) -> int | None:
        """1-based rank of ``item_id``, or None if absent."""
        try:
            return self.items.index(item_id) + 1
        except ValueError:
            return None


def _top_k(scores: np.ndarray, k: int, positive_only: bool = False) -> np.ndarray:
    """Indices of the k best scores; equal scores keep ascending index order."""
    idx = np.flatnonzero(scores > 0) if positive_only else np.arange(scores.size)
    if idx.size == 0 or k <= 0:
        return idx[:0]
    sub = scores[idx]
    if idx.size > k:
        # keep everything tied with the k-th value so the index tie-break is exact
        kth = np.partition(sub, idx.size - k)[idx.size - k]
        keep = sub >= kth
        idx, sub = idx[keep], sub[keep]
    order = np.lexsort((idx, -sub))[:k]
    return idx[order]


def bm25_idf(df, n_docs):
    """Non-negative smoothed IDF: ln(1 + (N - df + 0.5) / (df + 0.5))."""
    return np.log1p((n_docs - np.asarray(df, dtype=np.float64) + 0.5) / (np.asarray(df, dtype=np.float64) + 0.5))


class BM25Retriever(BaseEstimator):
    """Okapi BM25 over an inverted index.

    ``fit`` takes ``(doc_id, text)`` pairs. Documents are stored in ascending
    id order, so ties in score rank by ascending id. Only documents with a
    positive score are returned.
    """

    def __init__(self, k1=1.2, b=0.75):
        self.k1 = k1
        self.b = b

    def fit(self, X, y=None):
        docs = list(X)
        ids = [d[0] for d in docs]
        if len(set(ids)) != len(ids):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise ValueError(f"duplicate document id {dup!r}")
        docs.sort(key=lambda d: d[0])
        self.doc_ids_ = tuple(d[0] for d in docs)
        lengths = []
        postings: dict[str, tuple[list[int], list[int]]] = defaultdict(lambda: ([], []))
        for ordinal, (_, text) in enumerate(docs):
            tokens = tokenize(text)
            lengths.append(len(tokens))
            for term, tf in sorted(Counter(tokens).items()):
                plist = postings[term]
                plist[0].append(ordinal)
                plist[1].append(tf)
        self.postings_ = {t: (np.asarray(o, dtype=np.int64), np.asarray(f, dtype=np.float64))
                          for t, (o, f) in sorted(postings.items())}
        self.doc_lengths_ = np.asarray(lengths, dtype=np.float64)
        self.n_docs_ = len(docs)
        self.avgdl_ = float(self.doc_lengths_.mean()) if self.n_docs_ else 0.0
        return self

    def score_all(self, query: str) -> np.ndarray:
        check_is_fitted(self, "postings_")
        scores = np.zeros(self.n_docs_)
        if self.avgdl_ > 0:
            norm = self.k1 * (1 - self.b + self.b * self.doc_lengths_ / self.avgdl_)
        else:
            norm = np.full(self.n_docs_, self.k1)
        for term in tokenize(query):
            posting = self.postings_.get(term)
            if posting is None:
                continue
            ords, tf = posting
            idf = bm25_idf(ords.size, self.n_docs_)
            scores[ords] += idf * tf * (self.k1 + 1) / (tf + norm[ords])
        return scores

    def rank(self, query: str, k: int = 100) -> RankedList:
        scores = self.score_all(query)
        top = _top_k(scores, k, positive_only=True)
        return RankedList(tuple(self.doc_ids_[i] for i in top), tuple(float(scores[i]) for i in top))

    def to_dict(self) -> dict:
        check_is_fitted(self, "postings_")
        return {
            "k1": self.k1, "b": self.b, "doc_ids": list(self.doc_ids_),
            "doc_lengths": self.doc_lengths_.astype(int).tolist(),
            "postings": {t: [o.tolist(), f.astype(int).tolist()] for t, (o, f) in self.postings_.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BM25Retriever":
        r = cls(d["k1"], d["b"])
        r.doc_ids_ = tuple(d["doc_ids"])
        r.doc_lengths_ = np.asarray(d["doc_lengths"], dtype=np.float64)
        r.n_docs_ = len(r.doc_ids_)
        r.avgdl_ = float(r.doc_lengths_.mean()) if r.n_docs_ else 0.0
        r.postings_ = {t: (np.asarray(o, dtype=np.int64), np.asarray(f, dtype=np.float64))
                       for t, (o, f) in d["postings"].items()}
        return r


def build_bm25(docs: Iterable[tuple[str, str]], k1: float = 1.2, b: float = 0.75) -> BM25Retriever:
    return BM25Retriever(k1, b).fit(docs)


def bm25_rank(index: BM25Retriever, query: str, k: int = 100) -> RankedList:
    return index.rank(query, k)


class DenseRetriever(BaseEstimator):
    """Exact inner-product (cosine, for unit vectors) top-k search.

    Rows are held in ascending id order and scored in blocks of ``block_size``.
    """

    def __init__(self, block_size=8192):
        self.block_size = block_size

    def fit(self, X, y):
        vectors = np.asarray(X, dtype=np.float32)
        ids = list(y)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ValueError(f"{len(ids)} ids for vectors of shape {vectors.shape}")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids")
        if len(ids):
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            if np.abs(norms - 1).max() > 1e-6:
                raise ValueError("dense index rows must have unit norm")
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self.ids_ = tuple(ids[i] for i in order)
        self.vectors_ = np.ascontiguousarray(vectors[order])
        self.dim_ = vectors.shape[1]
        return self

    @classmethod
    def from_store(cls, store: EmbeddingStore, ids: Sequence[str] | None = None, **kwargs) -> "DenseRetriever":
        ids = list(store.ids) if ids is None else sorted(ids)
        return cls(**kwargs).fit(store.rows(ids) if ids else np.zeros((0, store.dim)), ids)

    def score_all(self, query_vec) -> np.ndarray:
        check_is_fitted(self, "vectors_")
        q = np.asarray(query_vec, dtype=np.float64).ravel()
        if q.size != self.dim_:
            raise ValueError(f"query dimension {q.size} != index dimension {self.dim_}")
        out = np.empty(len(self.ids_))
        for start in range(0, len(self.ids_), self.block_size):
            block = self.vectors_[start:start + self.block_size].astype(np.float64)
            # row-wise sum rather than BLAS gemv: identical rows must get identical
            # scores wherever they sit, or the id tie-break breaks
            out[start:start + block.shape[0]] = (block * q).sum(axis=1)
        return out

    def rank(self, query_vec, k: int = 100) -> RankedList:
        scores = self.score_all(query_vec)
        top = _top_k(scores, k)
        return RankedList(tuple(self.ids_[i] for i in top), tuple(float(scores[i]) for i in top))


def dense_rank(index: DenseRetriever, query_vec, k: int = 100) -> RankedList:
    return index.rank(query_vec, k)


# ---------------------------------------------------------------------------
# candidate pools


@dataclass(frozen=True)
class PoolQuery:
    query_id: str
    gt_item: str
    domain: str


@dataclass
class CandidatePool:
    """Items every query is ranked against.

    In shared mode (default) all queries see ``items``, the union of every
    query's sample and all ground-truth items. In private mode each query
    sees only its own sample plus its ground truth.
    """

    items: tuple[str, ...]
    queries: list[PoolQuery]
    private: dict[str, tuple[str, ...]] | None = None

    def candidates(self, query_id: str) -> tuple[str, ...]:
        if self.private is not None:
            return self.private[query_id]
        return self.items

    def __len__(self):
        return len(self.items)

    def save(self, jsonl_path, ids_path) -> None:
        with open(jsonl_path, "w", encoding="utf-8") as fh:
            for q in self.queries:
                row = {"query_id": q.query_id, "gt_item": q.gt_item, "domain": q.domain}
                if self.private is not None:
                    row["candidates"] = list(self.private[q.query_id])
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        Path(ids_path).write_text("".join(i + "\n" for i in self.items), encoding="utf-8")

    @classmethod
    def load(cls, jsonl_path, ids_path) -> "CandidatePool":
        queries, private = [], {}
        with open(jsonl_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                queries.append(PoolQuery(row["query_id"], row["gt_item"], row["domain"]))
                if "candidates" in row:
                    private[row["query_id"]] = tuple(row["candidates"])
        items = tuple(x for x in Path(ids_path).read_text(encoding="utf-8").splitlines() if x)
        return cls(items, queries, private or None)


def build_candidate_pool(eval_pairs: Iterable[tuple[str, str, str]], item_universe: Mapping[str, Iterable[str]],
                         n_per_query: int = 50, seed: int = 0, shared: bool = True) -> CandidatePool:
    """Sample ``n_per_query`` in-domain negatives per (query id, gt item, domain) triple.

    The ground-truth item is excluded from its own sample and added
    explicitly, so each query has exactly one relevant candidate. Domains
    with too few items contribute all of them.
    """
    universe = {d: sorted(set(items)) for d, items in item_universe.items()}
    rng = np.random.default_rng(seed)
    queries, private = [], {}
    members: set[str] = set()
    for qid, gt, domain in eval_pairs:
        population = universe.get(domain, [])
        pos = bisect.bisect_left(population, gt)
        has_gt = pos < len(population) and population[pos] == gt
        size = len(population) - has_gt
        if size <= n_per_query:
            picks = range(size)
        else:
            picks = np.sort(rng.choice(size, size=n_per_query, replace=False))
        sample = [population[i + (has_gt and i >= pos)] for i in picks]
        queries.append(PoolQuery(qid, gt, domain))
        members.update(sample)
        members.add(gt)
        if not shared:
            private[qid] = tuple(sorted(set(sample) | {gt}))
    return CandidatePool(tuple(sorted(members)), queries, None if shared else private)


def write_ranked_tsv(path, rows: Iterable[tuple[str, RankedList]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, ranked in rows:
            for r, (item, score) in enumerate(ranked, 1):
                fh.write(f"{qid}\t{r}\t{item}\t{score:.9g}\n")

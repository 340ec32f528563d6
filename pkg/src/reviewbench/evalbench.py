"""Ranking metrics and evaluation harnesses (product search, next-item baseline, ablations)."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from reviewbench.encoder import EmbeddingStore
from reviewbench.pipeline import SequenceExample, TrainingPair
from reviewbench.retrieval import BM25Retriever, CandidatePool, DenseRetriever, RankedList, _top_k

logger = logging.getLogger(__name__)

ALL = "All"


def _rank(ranked, gt: str) -> int | None:
    if isinstance(ranked, RankedList):
        return ranked.rank_of(gt)
    items = list(ranked)
    return items.index(gt) + 1 if gt in items else None


def ndcg_from_rank(rank: int | None, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def recall_from_rank(rank: int | None, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if rank is not None and rank <= k else 0.0


def ndcg_at_k(ranked, gt: str, k: int) -> float:
    """NDCG@k with a single relevant item: 1/log2(rank+1) inside the top k, else 0."""
    return ndcg_from_rank(_rank(ranked, gt), k)


def recall_at_k(ranked, gt: str, k: int) -> float:
    return recall_from_rank(_rank(ranked, gt), k)


@dataclass
class MetricReport:
    task: str
    model: str
    per_domain: dict[str, dict[str, float]]
    counts: dict[str, int] = field(default_factory=dict)
    excluded: int = 0
    note: str = ""

    @property
    def metrics(self) -> list[str]:
        names: list[str] = []
        for values in self.per_domain.values():
            names.extend(m for m in values if m not in names)
        return names

    @property
    def all(self) -> dict[str, float]:
        """Unweighted mean over domains."""
        out = {}
        for m in self.metrics:
            vals = [v[m] for v in self.per_domain.values() if m in v]
            out[m] = math.fsum(vals) / len(vals)
        return out

    def micro(self) -> dict[str, float]:
        """Query-weighted mean over domains (diagnostic only)."""
        out = {}
        for m in self.metrics:
            num = math.fsum(v[m] * self.counts.get(d, 0) for d, v in self.per_domain.items() if m in v)
            den = sum(self.counts.get(d, 0) for d, v in self.per_domain.items() if m in v)
            out[m] = num / den if den else 0.0
        return out

    def to_dict(self) -> dict:
        return {"task": self.task, "model": self.model, "per_domain": self.per_domain, ALL: self.all,
                "counts": self.counts, "excluded": self.excluded, "note": self.note}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        metrics = self.metrics
        header = ["domain"] + metrics + ["n"]
        rows = [[d] + [f"{v.get(m, float('nan')):.4f}" for m in metrics] + [str(self.counts.get(d, ""))]
                for d, v in sorted(self.per_domain.items())]
        rows.append([ALL] + [f"{self.all[m]:.4f}" for m in metrics] + [str(sum(self.counts.values()))])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = [f"{self.task} / {self.model}" + (f"  ({self.note})" if self.note else "")]
        for r in [header] + rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        if self.excluded:
            lines.append(f"excluded queries: {self.excluded}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "model", "domain", "metric", "value"])
        for d, vals in sorted(self.per_domain.items()):
            for m, v in vals.items():
                w.writerow([self.task, self.model, d, m, repr(v)])
        for m, v in self.all.items():
            w.writerow([self.task, self.model, ALL, m, repr(v)])
        return buf.getvalue()


def _report(task: str, model: str, per_query: dict[str, list[dict[str, float]]], excluded: int,
            note: str = "") -> MetricReport:
    per_domain = {}
    counts = {}
    for domain in sorted(per_query):
        rows = per_query[domain]
        per_domain[domain] = {m: math.fsum(r[m] for r in rows) / len(rows) for m in rows[0]}
        counts[domain] = len(rows)
    return MetricReport(task, model, per_domain, counts, excluded, note)


# ---------------------------------------------------------------------------
# product search


@dataclass(frozen=True)
class EvalQuery:
    query_id: str
    query: str | tuple[str, ...]
    gt_item: str
    domain: str

    def to_dict(self) -> dict:
        return {"qid": self.query_id, "query": self.query, "item_id": self.gt_item, "domain": self.domain}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalQuery":
        return cls(str(d.get("qid", d.get("query_id"))), d["query"], d.get("item_id", d.get("gt_item")), d["domain"])


@dataclass
class EvalTask:
    kind: str
    queries: list[EvalQuery]

    def __post_init__(self):
        if self.kind not in ("conventional_search", "complex_search", "seqrec"):
            raise ValueError(f"unknown task kind {self.kind!r}")


class BM25Ranker:
    """Scores pool items by BM25 over their metadata text."""

    positive_only = True

    def __init__(self, item_texts: Mapping[str, str], items: Iterable[str] | None = None, k1=1.2, b=0.75):
        keep = item_texts.keys() if items is None else [i for i in items if i in item_texts]
        self.index = BM25Retriever(k1, b).fit((i, item_texts[i]) for i in keep)
        self.ids = self.index.doc_ids_

    def scores(self, query: EvalQuery) -> np.ndarray:
        return self.index.score_all(str(query.query))


class DenseRanker:
    """Cosine scores between an encoded query and stored item vectors."""

    positive_only = False

    def __init__(self, store: EmbeddingStore, encode_queries: Callable[[list[str]], np.ndarray],
                 items: Iterable[str] | None = None):
        ids = None if items is None else [i for i in items if i in store]
        self.index = DenseRetriever.from_store(store, ids)
        self.ids = self.index.ids_
        self._encode = encode_queries
        self._cache: dict[str, np.ndarray] = {}

    def prepare(self, queries: Sequence[EvalQuery]) -> None:
        todo = [q for q in queries if q.query_id not in self._cache]
        if todo:
            vecs = self._encode([str(q.query) for q in todo])
            self._cache.update({q.query_id: v for q, v in zip(todo, vecs)})

    def scores(self, query: EvalQuery) -> np.ndarray:
        if query.query_id not in self._cache:
            self.prepare([query])
        return self.index.score_all(self._cache[query.query_id])


def evaluate_search(task: EvalTask, ranker, pool: CandidatePool, k: int = 100, model: str = "",
                    rankings: list | None = None) -> MetricReport:
    """Rank every query against its pool candidates and report NDCG@k / Recall@k per domain.

    Queries whose ground truth cannot be scored (no metadata, not in pool)
    are excluded and counted. If ``rankings`` is a list, ``(query_id,
    RankedList)`` tuples are appended to it.
    """
    ids = ranker.ids
    position = {item: i for i, item in enumerate(ids)}
    shared_mask = None
    if pool.private is None:
        shared_mask = np.zeros(len(ids), dtype=bool)
        shared_mask[[position[i] for i in pool.items if i in position]] = True
    if hasattr(ranker, "prepare"):
        ranker.prepare(task.queries)
    per_query: dict[str, list[dict[str, float]]] = {}
    excluded = 0
    for q in task.queries:
        if q.gt_item not in position:
            excluded += 1
            continue
        if shared_mask is None:
            cands = pool.private.get(q.query_id) if pool.private else None
            if not cands or q.gt_item not in cands:
                excluded += 1
                continue
            mask = np.zeros(len(ids), dtype=bool)
            mask[[position[i] for i in cands if i in position]] = True
        else:
            if not shared_mask[position[q.gt_item]]:
                excluded += 1
                continue
            mask = shared_mask
        scores = ranker.scores(q)
        # restrict ranking to candidates; ids are ascending so the index tie-break is the id tie-break
        cand_idx = np.flatnonzero(mask)
        top = cand_idx[_top_k(scores[cand_idx], k, positive_only=ranker.positive_only)]
        ranked = RankedList(tuple(ids[i] for i in top), tuple(float(scores[i]) for i in top))
        if rankings is not None:
            rankings.append((q.query_id, ranked))
        rank = ranked.rank_of(q.gt_item)
        per_query.setdefault(q.domain, []).append(
            {f"NDCG@{k}": ndcg_from_rank(rank, k), f"Recall@{k}": recall_from_rank(rank, k)})
    if excluded:
        logger.warning("evaluate_search: %d query(ies) excluded (ground truth not rankable)", excluded)
    return _report(task.kind, model, per_query, excluded)


def expected_random_ndcg(pool_size: int, k: int) -> float:
    """E[NDCG@k] when the ground truth's rank is uniform on 1..pool_size."""
    return math.fsum(1.0 / math.log2(r + 1) for r in range(1, min(pool_size, k) + 1)) / pool_size


# ---------------------------------------------------------------------------
# next-item baseline

SEQREC_NOTE = "embedding-similarity next-item baseline (plumbing, not a sequential recommender)"


def evaluate_seqrec(examples: Iterable[SequenceExample], store: EmbeddingStore,
                    candidates: Mapping[str, Iterable[str]] | Iterable[str], ks: Sequence[int] = (10, 50),
                    n_recent: int = 10, model: str = "", split: str | None = None) -> MetricReport:
    """Score in-domain candidates by cosine to the mean of the last ``n_recent`` history vectors.

    ``candidates`` is either a mapping domain -> items or one item set used
    for every domain. Examples with empty or unembedded history, or a target
    outside the candidates, are skipped and counted.
    """
    if isinstance(candidates, Mapping):
        cand_by_domain = {d: sorted(set(v) & set(store.ids)) for d, v in candidates.items()}
    else:
        shared = sorted(set(candidates) & set(store.ids))
        cand_by_domain = None
    indexes: dict[str, tuple[list[str], np.ndarray, dict[str, int]]] = {}

    def index_for(domain):
        if domain not in indexes:
            items = cand_by_domain.get(domain, []) if cand_by_domain is not None else shared
            indexes[domain] = (items, store.rows(items).astype(np.float64) if items else np.zeros((0, store.dim)),
                               {i: n for n, i in enumerate(items)})
        return indexes[domain]

    per_query: dict[str, list[dict[str, float]]] = {}
    skipped = 0
    for ex in examples:
        if split is not None and ex.split != split:
            continue
        hist = [h for h in ex.history[-n_recent:]]
        items, matrix, pos = index_for(ex.domain)
        if not hist or any(h not in store for h in hist) or ex.target not in pos:
            skipped += 1
            continue
        u = store.rows(hist).astype(np.float64).mean(axis=0)
        norm = np.linalg.norm(u)
        scores = (matrix * (u / norm)).sum(axis=1) if norm > 0 else np.zeros(len(items))
        top = _top_k(scores, max(ks))
        ranked = [items[i] for i in top]
        rank = ranked.index(ex.target) + 1 if ex.target in ranked else None
        row = {}
        for k in ks:
            row[f"Recall@{k}"] = recall_from_rank(rank, k)
            row[f"NDCG@{k}"] = ndcg_from_rank(rank, k)
        per_query.setdefault(ex.domain, []).append(row)
    if skipped:
        logger.warning("evaluate_seqrec: %d example(s) skipped", skipped)
    return _report("seqrec", model, per_query, skipped, SEQREC_NOTE)


def select_by_validation(stores: Mapping[str, EmbeddingStore], examples: Sequence[SequenceExample], candidates,
                         ks: Sequence[int] = (10, 50), n_recent: int = 10):
    """Pick the store with the best validation NDCG@10 and report its test metrics.

    Returns ``(best_label, {label: valid_report}, test_report)``.
    """
    valid = {label: evaluate_seqrec(examples, s, candidates, ks, n_recent, label, split="valid")
             for label, s in stores.items()}
    metric = "NDCG@10" if 10 in ks else f"NDCG@{ks[0]}"
    best = max(sorted(valid), key=lambda lbl: valid[lbl].all.get(metric, 0.0) if valid[lbl].per_domain else -1.0)
    test = evaluate_seqrec(examples, stores[best], candidates, ks, n_recent, best, split="test")
    return best, valid, test


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class SearchBenchmark:
    """One search evaluation: queries, their pool and the item texts to embed."""

    name: str
    task: EvalTask
    pool: CandidatePool
    item_texts: Mapping[str, str]
    k: int = 100


@dataclass
class AblationTable:
    rows: list[dict] = field(default_factory=list)

    def value(self, config: str, task: str, metric: str, domain: str = ALL) -> float:
        for r in self.rows:
            if (r["config"], r["task"], r["metric"], r["domain"]) == (config, task, metric, domain):
                return r["value"]
        raise KeyError((config, task, metric, domain))

    def failed(self) -> list[str]:
        return sorted({r["config"] for r in self.rows if r["status"] != "ok"})

    def columns(self, config: str) -> set[tuple[str, str, str]]:
        return {(r["task"], r["metric"], r["domain"]) for r in self.rows if r["config"] == config and r["status"] == "ok"}

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2, sort_keys=True)

    def to_text(self) -> str:
        ok = [r for r in self.rows if r["status"] == "ok" and r["domain"] == ALL]
        cols = sorted({(r["task"], r["metric"]) for r in ok})
        configs = list(dict.fromkeys(r["config"] for r in self.rows))
        header = ["config"] + [f"{t}:{m}" for t, m in cols]
        lines = ["\t".join(header)]
        for c in configs:
            if c in self.failed():
                lines.append(f"{c}\tFAILED")
                continue
            vals = {(r["task"], r["metric"]): r["value"] for r in ok if r["config"] == c}
            lines.append("\t".join([c] + [f"{vals.get(col, float('nan')):.4f}" for col in cols]))
        return "\n".join(lines)


def run_ablation_matrix(configs: Sequence[tuple[str, "TrainConfig"]], pairs: Sequence[TrainingPair],
                        benchmarks: Sequence[SearchBenchmark], seeds: Sequence[int] | None = None) -> AblationTable:
    """Train each labelled config and evaluate it on every benchmark.

    With ``seeds`` every config is trained once per seed; ``value`` is the mean
    and ``values`` keeps the per-seed numbers. A config whose training fails
    gets one ``failed`` row; the rest continue.
    """
    from dataclasses import replace

    from reviewbench.model import HashingSentenceEncoder
    from reviewbench.trainer import train

    table = AblationTable()
    for label, config in configs:
        runs = [config] if not seeds else [replace(config, seed=int(s)) for s in seeds]
        collected: dict[tuple[str, str, str], list[float]] = {}
        try:
            for cfg in runs:
                params, _ = train(cfg, pairs)
                enc = HashingSentenceEncoder.from_params(params)
                for bench in benchmarks:
                    ids = sorted(bench.item_texts)
                    vecs = enc.transform([bench.item_texts[i] for i in ids]).astype(np.float32)
                    ranker = DenseRanker(EmbeddingStore(ids, vecs, check=False), enc.transform, bench.pool.items)
                    report = evaluate_search(bench.task, ranker, bench.pool, bench.k, model=label)
                    for domain, vals in list(report.per_domain.items()) + [(ALL, report.all)]:
                        for metric, v in vals.items():
                            collected.setdefault((bench.name, metric, domain), []).append(v)
        except Exception as exc:  # a failed row must not stop the grid
            logger.error("ablation config %s failed: %s", label, exc)
            table.rows.append({"config": label, "task": "", "metric": "", "domain": "", "value": None,
                               "status": "failed", "error": str(exc)})
            continue
        for (task, metric, domain), vs in collected.items():
            row = {"config": label, "task": task, "metric": metric, "domain": domain,
                   "value": vs[0] if len(vs) == 1 else math.fsum(vs) / len(vs), "status": "ok", "error": ""}
            if seeds:
                row["values"] = vs
            table.rows.append(row)
    return table

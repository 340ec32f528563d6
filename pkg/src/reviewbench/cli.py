"""Command-line entry point: ``reviewbench <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Commands that write artifacts also write ``<output>.manifest.json`` with
input hashes, the resolved-config hash and output hashes.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from reviewbench import __version__
from reviewbench.corpus import DataError, ItemMeta, compute_stats, ingest, read_jsonl, write_jsonl
from reviewbench.pipeline import (
    SequenceExample,
    SplitBoundaries,
    TrainingPair,
    build_pairs,
    build_sequences,
    downsample,
    find_split_boundaries,
    find_split_boundaries_by_domain,
    metadata_text,
    parse_ratio,
)

logger = logging.getLogger("reviewbench")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "ratio": "8:1:1",
    "min_chars": 30,
    "fraction": 0.1,
    "max_len": 50,
    "pool_size": 50,
    "k": 100,
    "ks": [10, 50],
    "n_recent": 10,
    "retriever": "bm25",
    "bm25": {"k1": 1.2, "b": 0.75},
    "train": {},
    "endpoint": {},
    "n_queries": 22000,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config


def _check_keys(cfg: dict) -> None:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    from reviewbench.querygen import EndpointConfig
    from reviewbench.trainer import TrainConfig

    train_keys = {f.name for f in fields(TrainConfig)} | {"lambda"}
    bad = set(cfg.get("train", {})) - train_keys
    bad |= {f"endpoint.{k}" for k in set(cfg.get("endpoint", {})) - {f.name for f in fields(EndpointConfig)}}
    bad |= {f"bm25.{k}" for k in set(cfg.get("bm25", {})) - {"k1", "b"}}
    if bad:
        raise UsageError(f"unknown config keys: {sorted(bad)}")


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        _check_keys(loaded)
        for key, value in loaded.items():
            if isinstance(value, dict):
                cfg[key] = {**cfg.get(key, {}), **value}
            else:
                cfg[key] = value
    # explicit flags win over the file
    for key in ("seed", "ratio", "min_chars", "fraction", "max_len", "pool_size", "k", "n_recent", "retriever",
                "n_queries"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "ks", None):
        cfg["ks"] = [int(x) for x in args.ks.split(",")]
    for key in ("k1", "b"):
        if getattr(args, key, None) is not None:
            cfg["bm25"][key] = getattr(args, key)
    for flag, key in TRAIN_FLAGS:
        value = getattr(args, flag, None)
        if value is not None:
            cfg["train"][key] = value
    for flag, key in ENDPOINT_FLAGS:
        value = getattr(args, flag, None)
        if value is not None:
            cfg["endpoint"][key] = value
    _check_keys(cfg)
    if getattr(args, "command", None) in ("train", "ablate"):
        # log and hash the complete training config, not just the overrides
        cfg["train"] = _train_config(cfg).to_dict()
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(target, command: str, cfg: dict, inputs, outputs) -> Path:
    def hashes(paths):
        out = {}
        for p in paths:
            p = Path(p)
            if p.is_dir():
                for f in sorted(p.iterdir()):
                    if f.is_file() and not f.name.endswith(".manifest.json"):
                        out[str(f)] = sha256_file(f)
            elif p.exists():
                out[str(p)] = sha256_file(p)
        return out

    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "inputs": hashes(inputs),
        "outputs": hashes(outputs),
    }
    path = Path(str(target) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# loaders


def _load_reviews(paths, key):
    for p in paths:
        yield from ingest(p, "reviews", key=key)


def _load_metadata(paths, key) -> dict[str, ItemMeta]:
    out: dict[str, ItemMeta] = {}
    for p in paths:
        for m in ingest(p, "metadata", key=key):
            out[m.item_id] = m
    return out


def _load_boundaries(path) -> SplitBoundaries:
    d = json.loads(Path(path).read_text())
    if "t1" not in d:
        raise DataError(f"{path}: per-domain boundaries are not accepted here; pass a global split")
    return SplitBoundaries.from_dict(d)


def _load_queries(path):
    from reviewbench.evalbench import EvalQuery

    return [EvalQuery.from_dict(d) for d in read_jsonl(path)]


def _train_config(cfg: dict):
    from reviewbench.trainer import TrainConfig

    d = dict(cfg["train"])
    d.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg):
    stream = ingest(args.input, args.kind, domain=args.domain, key=args.key)
    n = write_jsonl(args.output, (r.to_dict() for r in stream))
    print(f"records={n} skipped={stream.skipped}")
    write_manifest(args.output, "ingest", cfg, [args.input], [args.output])


def cmd_stats(args, cfg):
    reviews = _load_reviews(args.reviews, args.key)
    metas = (m for p in (args.metadata or []) for m in ingest(p, "metadata", key=args.key))
    stats = compute_stats(reviews, metas)
    text = json.dumps(stats.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
        write_manifest(args.output, "stats", cfg, args.reviews + (args.metadata or []), [args.output])


def cmd_split(args, cfg):
    ratio = parse_ratio(cfg["ratio"])
    if args.per_domain:
        result = find_split_boundaries_by_domain(_load_reviews(args.reviews, args.key), ratio)
        for d, b in result.items():
            print(f"{d}: t1={b.t1} t2={b.t2} counts={'/'.join(map(str, b.counts))} deviation={b.deviation:g}")
        payload = {d: b.to_dict() for d, b in result.items()}
    else:
        b = find_split_boundaries([r.timestamp for r in _load_reviews(args.reviews, args.key)], ratio)
        print(f"t1={b.t1} t2={b.t2} counts={'/'.join(map(str, b.counts))} deviation={b.deviation:g}")
        payload = b.to_dict()
    if args.output:
        Path(args.output).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        write_manifest(args.output, "split", cfg, args.reviews, [args.output])


def cmd_pairs(args, cfg):
    meta = _load_metadata(args.metadata, args.key)
    b = _load_boundaries(args.boundaries) if args.boundaries else None
    pairs = build_pairs(_load_reviews(args.reviews, args.key), meta, b, args.split, cfg["min_chars"])
    if cfg["fraction"] < 1.0:
        pairs = downsample(pairs, cfg["fraction"], cfg["seed"])
    n = write_jsonl(args.output, (p.to_dict() for p in pairs))
    print(f"pairs={n}")
    write_manifest(args.output, "pairs", cfg, args.reviews + args.metadata + ([args.boundaries] if args.boundaries else []),
                   [args.output])


def cmd_sequences(args, cfg):
    b = _load_boundaries(args.boundaries) if args.boundaries else None
    seqs = build_sequences(_load_reviews(args.reviews, args.key), b, cfg["max_len"])
    n = write_jsonl(args.output, (s.to_dict() for s in seqs))
    counts = {s: sum(1 for x in seqs if x.split == s) for s in ("train", "valid", "test")}
    print(f"examples={n} " + " ".join(f"{k}={v}" for k, v in counts.items()))
    write_manifest(args.output, "sequences", cfg, args.reviews + ([args.boundaries] if args.boundaries else []),
                   [args.output])


def cmd_train(args, cfg):
    from reviewbench.trainer import save_checkpoint, train

    config = _train_config(cfg)
    pairs = [TrainingPair.from_dict(d) for d in read_jsonl(args.pairs)]
    params, history = train(config, pairs)
    save_checkpoint(args.output, params, config, history)
    for r in history:
        print(f"epoch={r.epoch} phase={r.phase} l_cl={r.l_cl:.6f} l_pt={r.l_pt:.6f} l_total={r.l_total:.6f}")
    write_manifest(Path(args.output) / "checkpoint", "train", cfg, [args.pairs], [args.output])


def cmd_embed(args, cfg):
    from reviewbench.encoder import EmbeddingStore, embed_corpus
    from reviewbench.trainer import load_checkpoint

    if args.import_text:
        store = EmbeddingStore.from_text(args.import_text)
        store.save(args.output)
        inputs = [args.import_text]
    elif args.queries:
        params, _, _ = load_checkpoint(args.checkpoint)
        from reviewbench.encoder import encode_batch

        qs = _load_queries(args.queries)
        store = EmbeddingStore([q.query_id for q in qs], encode_batch(params, [str(q.query) for q in qs]))
        store.save(args.output)
        inputs = [args.checkpoint, args.queries]
    else:
        if not args.checkpoint or not args.metadata:
            raise UsageError("embed needs --checkpoint and --metadata (or --import-text)")
        params, _, _ = load_checkpoint(args.checkpoint)
        meta = (m for p in args.metadata for m in ingest(p, "metadata", key=args.key))
        store = embed_corpus(params, meta, args.output)
        inputs = [args.checkpoint] + args.metadata
    print(f"count={store.count} d={store.dim}")
    write_manifest(args.output, "embed", cfg, inputs, [args.output])


def cmd_index(args, cfg):
    from reviewbench.retrieval import build_bm25

    meta = _load_metadata(args.metadata, args.key)
    index = build_bm25(((i, metadata_text(m)) for i, m in meta.items()), cfg["bm25"]["k1"], cfg["bm25"]["b"])
    Path(args.output).write_text(json.dumps(index.to_dict(), sort_keys=True))
    print(f"docs={index.n_docs_} terms={len(index.postings_)} avgdl={index.avgdl_:.4f}")
    write_manifest(args.output, "index", cfg, args.metadata, [args.output])


def _pool_for(queries, meta, cfg, shared):
    from reviewbench.retrieval import build_candidate_pool

    universe: dict[str, list[str]] = {}
    for i, m in meta.items():
        universe.setdefault(m.domain, []).append(i)
    triples = [(q.query_id, q.gt_item, q.domain) for q in queries]
    return build_candidate_pool(triples, universe, cfg["pool_size"], cfg["seed"], shared=shared)


def cmd_eval_search(args, cfg):
    from reviewbench.encoder import EmbeddingStore
    from reviewbench.evalbench import BM25Ranker, DenseRanker, EvalTask, evaluate_search
    from reviewbench.retrieval import BM25Retriever, write_ranked_tsv

    meta = _load_metadata(args.metadata, args.key)
    queries = _load_queries(args.queries)
    pool = _pool_for(queries, meta, cfg, shared=not args.private_pools)
    task = EvalTask(args.task, queries)
    texts = {i: metadata_text(m) for i, m in meta.items()}
    if cfg["retriever"] == "bm25":
        ranker = BM25Ranker(texts, pool.items, cfg["bm25"]["k1"], cfg["bm25"]["b"])
        if args.index:
            full = BM25Retriever.from_dict(json.loads(Path(args.index).read_text()))
            if set(full.doc_ids_) >= set(pool.items):
                logger.info("prebuilt index covers the pool; statistics still come from the pool itself")
        model = "bm25"
    elif cfg["retriever"] == "dense":
        if args.store:
            store = EmbeddingStore.load(args.store)
        elif args.checkpoint:
            from reviewbench.encoder import embed_corpus
            from reviewbench.trainer import load_checkpoint

            params, _, _ = load_checkpoint(args.checkpoint)
            store = embed_corpus(params, (meta[i] for i in pool.items if i in meta))
        else:
            raise UsageError("dense retrieval needs --store or --checkpoint")
        if args.query_store:
            qstore = EmbeddingStore.load(args.query_store)
            by_text = {str(q.query): q.query_id for q in queries}

            def encode_queries(texts_):
                return qstore.rows([by_text[t] for t in texts_])
        elif args.checkpoint:
            from reviewbench.encoder import encode_batch
            from reviewbench.trainer import load_checkpoint

            qparams, _, _ = load_checkpoint(args.checkpoint)

            def encode_queries(texts_):
                return encode_batch(qparams, list(texts_))
        else:
            raise UsageError("dense retrieval needs --checkpoint or --query-store to encode queries")
        ranker = DenseRanker(store, encode_queries, pool.items)
        model = args.model or "dense"
    else:
        raise UsageError(f"unknown retriever {cfg['retriever']!r}")
    rankings: list = []
    report = evaluate_search(task, ranker, pool, cfg["k"], model=args.model or model, rankings=rankings)
    print(report.to_table())
    outputs = []
    if args.output:
        Path(args.output).write_text(report.to_json() + "\n")
        outputs.append(args.output)
        Path(str(args.output) + ".csv").write_text(report.to_csv())
        outputs.append(str(args.output) + ".csv")
    if args.ranked_output:
        write_ranked_tsv(args.ranked_output, rankings)
        outputs.append(args.ranked_output)
    if args.pool_output:
        pool.save(f"{args.pool_output}.jsonl", f"{args.pool_output}.ids")
        outputs += [f"{args.pool_output}.jsonl", f"{args.pool_output}.ids"]
    if outputs:
        write_manifest(outputs[0], "eval-search", cfg, [args.queries] + args.metadata, outputs)


def cmd_eval_seqrec(args, cfg):
    from reviewbench.encoder import EmbeddingStore
    from reviewbench.evalbench import evaluate_seqrec

    store = EmbeddingStore.load(args.store)
    examples = [SequenceExample.from_dict(d) for d in read_jsonl(args.sequences)]
    if args.metadata:
        meta = _load_metadata(args.metadata, args.key)
        candidates: dict[str, list[str]] = {}
        for i, m in meta.items():
            candidates.setdefault(m.domain, []).append(i)
    else:
        candidates = store.ids
    report = evaluate_seqrec(examples, store, candidates, cfg["ks"], cfg["n_recent"], args.model or "store",
                             split=args.split)
    print(report.to_table())
    if args.output:
        Path(args.output).write_text(report.to_json() + "\n")
        write_manifest(args.output, "eval-seqrec", cfg, [args.store, args.sequences] + (args.metadata or []),
                       [args.output])


def cmd_gen_queries(args, cfg):
    from reviewbench.querygen import (
        PROMPT_HASH,
        ChatClient,
        EndpointConfig,
        MockChatTransport,
        RecordingTransport,
        ReplayTransport,
        generate_queries,
        query_records,
        select_sources,
    )

    meta = _load_metadata(args.metadata, args.key)
    b = _load_boundaries(args.boundaries) if args.boundaries else None
    sources = select_sources(_load_reviews(args.reviews, args.key), cfg["n_queries"], cfg["seed"], b)
    try:
        endpoint = EndpointConfig.from_dict(cfg["endpoint"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid endpoint config: {exc}") from exc
    if args.replay:
        transport = ReplayTransport(args.replay)
    elif args.mock:
        transport = MockChatTransport()
    else:
        transport = None
    recorder = RecordingTransport(transport or __import__("httpx").HTTPTransport()) if args.record else None
    with ChatClient(endpoint, recorder or transport) as client:
        results = generate_queries(sources, meta, client)
    rows = query_records(results, PROMPT_HASH)
    write_jsonl(args.output, rows)
    failed = {}
    for q in results:
        if not q.ok:
            failed[q.reason] = failed.get(q.reason, 0) + 1
    print(f"sources={len(sources)} ok={len(rows)} failed={sum(failed.values())} "
          + " ".join(f"{k}={v}" for k, v in sorted(failed.items())))
    outputs = [args.output]
    if recorder is not None:
        recorder.save(args.record)
        outputs.append(args.record)
    write_manifest(args.output, "gen-queries", cfg,
                   args.reviews + args.metadata + ([args.replay] if args.replay else []), outputs)


def default_ablation_configs(base, single_domain: str):
    """All-domain vs single-domain crossed with scratch vs aux-pretrained init."""
    from dataclasses import replace

    out = []
    for dom_label, dom in (("all", None), (single_domain, (single_domain,))):
        for init in ("scratch", "from_aux_pretrained"):
            out.append((f"{dom_label}/{init}", replace(base, domain_filter=dom, init_mode=init)))
    return out


def cmd_ablate(args, cfg):
    from reviewbench.evalbench import EvalTask, SearchBenchmark, run_ablation_matrix
    from reviewbench.trainer import TrainConfig

    base = _train_config(cfg)
    if args.configs:
        raw = json.loads(Path(args.configs).read_text())
        configs = [(c.pop("label"), TrainConfig.from_dict({**base.to_dict(), **c})) for c in raw]
    else:
        configs = default_ablation_configs(base, args.single_domain)
    pairs = [TrainingPair.from_dict(d) for d in read_jsonl(args.pairs)]
    meta = _load_metadata(args.metadata, args.key)
    queries = _load_queries(args.queries)
    texts = {i: metadata_text(m) for i, m in meta.items()}
    benches = []
    for name, qs in (("all_domains", queries),
                     ("out_of_domain", [q for q in queries if q.domain != args.single_domain])):
        pool = _pool_for(qs, meta, cfg, shared=True)
        benches.append(SearchBenchmark(name, EvalTask(args.task, qs), pool, texts, cfg["k"]))
    table = run_ablation_matrix(configs, pairs, benches, args.seeds)
    print(table.to_text())
    Path(args.output).write_text(table.to_json() + "\n")
    write_manifest(args.output, "ablate", cfg, [args.pairs, args.queries] + args.metadata, [args.output])
    if table.failed():
        logger.error("failed configs: %s", ", ".join(table.failed()))
        return EXIT_RUNTIME


def cmd_synth(args, cfg):
    from reviewbench.synthetic import make_pairs, make_queries, make_reviews, make_world, write_corpus

    world = make_world(n_items=args.n_items, seed=cfg["seed"])
    reviews = make_reviews(world, args.n_reviews, args.n_users, seed=cfg["seed"] + 3)
    paths = write_corpus(args.output_dir, world, reviews)
    out = Path(args.output_dir)
    write_jsonl(out / "pairs_synthetic.jsonl", (p.to_dict() for p in make_pairs(world, args.n_pairs, cfg["seed"] + 1)))
    write_jsonl(out / "queries_synthetic.jsonl", (q.to_dict() for q in make_queries(world, 2, cfg["seed"] + 2)))
    print(f"items={len(world.item_ids)} reviews={len(reviews)} domains={','.join(world.domains)}")
    write_manifest(out / "corpus", "synth", cfg, [], paths["reviews"] + paths["metadata"]
                   + [out / "pairs_synthetic.jsonl", out / "queries_synthetic.jsonl"])


# ---------------------------------------------------------------------------
# parser

TRAIN_FLAGS = [
    ("tau", "tau"), ("lam", "lam"), ("batch_size", "batch_size"), ("learning_rate", "learning_rate"),
    ("epochs", "epochs"), ("domain_filter", "domain_filter"), ("init_mode", "init_mode"),
    ("aux_epochs", "aux_epochs"), ("loss_reduction", "loss_reduction"), ("symmetric", "symmetric"),
    ("hidden_dim", "hidden_dim"), ("dim", "dim"), ("n_buckets", "n_buckets"), ("n_negatives", "n_negatives"),
    ("mask_rate", "mask_rate"), ("max_tokens", "max_tokens"), ("hash_seed", "hash_seed"),
]
ENDPOINT_FLAGS = [
    ("base_url", "base_url"), ("model_name", "model"), ("token_env", "token_env"), ("timeout", "timeout"),
    ("max_retries", "max_retries"), ("max_concurrency", "max_concurrency"),
    ("rate_per_minute", "rate_per_minute"),
]


def _csv_list(text):
    return tuple(x for x in text.split(",") if x)


def _int_list(text):
    try:
        return tuple(int(x) for x in _csv_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_train_flags(p):
    g = p.add_argument_group("training (mirrors TrainConfig)")
    g.add_argument("--tau", type=float)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--domain-filter", type=_csv_list, help="comma-separated category tags")
    g.add_argument("--init-mode", choices=["scratch", "from_aux_pretrained"])
    g.add_argument("--aux-epochs", type=int)
    g.add_argument("--loss-reduction", choices=["mean", "sum"])
    g.add_argument("--symmetric", action="store_true", default=None)
    g.add_argument("--hidden-dim", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--n-buckets", type=int)
    g.add_argument("--n-negatives", type=int)
    g.add_argument("--mask-rate", type=float)
    g.add_argument("--max-tokens", type=int)
    g.add_argument("--hash-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    # shared flags may appear before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given at the top level
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--key", help="item join key in JSONL records (default parent_asin)")
    common.add_argument("--log-level", help="default WARNING")

    parser = _Parser(prog="reviewbench", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "validate and normalize one reviews or metadata JSONL file")
    p.add_argument("--kind", choices=["reviews", "metadata"], required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--domain")
    p.add_argument("--output", required=True)

    p = add("stats", cmd_stats, "corpus statistics")
    p.add_argument("--reviews", nargs="+", required=True)
    p.add_argument("--metadata", nargs="+")
    p.add_argument("--output")

    p = add("split", cmd_split, "find temporal split boundaries")
    p.add_argument("--reviews", nargs="+", required=True)
    p.add_argument("--ratio")
    p.add_argument("--per-domain", action="store_true")
    p.add_argument("--output")

    p = add("pairs", cmd_pairs, "build (context, metadata) training pairs")
    p.add_argument("--reviews", nargs="+", required=True)
    p.add_argument("--metadata", nargs="+", required=True)
    p.add_argument("--boundaries")
    p.add_argument("--split", default="train", choices=["train", "valid", "test"])
    p.add_argument("--min-chars", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--output", required=True)

    p = add("sequences", cmd_sequences, "export per-target interaction sequences")
    p.add_argument("--reviews", nargs="+", required=True)
    p.add_argument("--boundaries")
    p.add_argument("--max-len", type=int)
    p.add_argument("--output", required=True)

    p = add("train", cmd_train, "train the encoder")
    p.add_argument("--pairs", required=True)
    p.add_argument("--output", required=True, help="checkpoint directory")
    _add_train_flags(p)

    p = add("embed", cmd_embed, "embed item metadata (or queries) into a store")
    p.add_argument("--checkpoint")
    p.add_argument("--metadata", nargs="+")
    p.add_argument("--queries")
    p.add_argument("--import-text", help="convert id<TAB>v1,v2,... embeddings instead")
    p.add_argument("--output", required=True)

    p = add("index", cmd_index, "build a BM25 index over item metadata")
    p.add_argument("--metadata", nargs="+", required=True)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--output", required=True)

    p = add("eval-search", cmd_eval_search, "product-search evaluation (NDCG@k over a sampled pool)")
    p.add_argument("--queries", required=True)
    p.add_argument("--metadata", nargs="+", required=True)
    p.add_argument("--task", default="complex_search", choices=["conventional_search", "complex_search"])
    p.add_argument("--retriever", choices=["bm25", "dense"])
    p.add_argument("--checkpoint")
    p.add_argument("--store")
    p.add_argument("--query-store")
    p.add_argument("--index")
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--private-pools", action="store_true")
    p.add_argument("--model")
    p.add_argument("--output")
    p.add_argument("--ranked-output")
    p.add_argument("--pool-output")

    p = add("eval-seqrec", cmd_eval_seqrec, "embedding-similarity next-item baseline")
    p.add_argument("--sequences", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--metadata", nargs="+")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--ks")
    p.add_argument("--n-recent", type=int)
    p.add_argument("--model")
    p.add_argument("--output")

    p = add("gen-queries", cmd_gen_queries, "synthesize complex first-person queries")
    p.add_argument("--reviews", nargs="+", required=True)
    p.add_argument("--metadata", nargs="+", required=True)
    p.add_argument("--boundaries")
    p.add_argument("--n", dest="n_queries", type=int)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--mock", action="store_true", help="use the in-process mock endpoint")
    src.add_argument("--replay", help="serve responses from a recorded transcript")
    p.add_argument("--record", help="write the request/response transcript here")
    p.add_argument("--base-url")
    p.add_argument("--model-name")
    p.add_argument("--token-env")
    p.add_argument("--timeout", type=float)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--max-concurrency", type=int)
    p.add_argument("--rate-per-minute", type=int)
    p.add_argument("--output", required=True)

    p = add("ablate", cmd_ablate, "train/evaluate the domain x initialization grid")
    p.add_argument("--pairs", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--metadata", nargs="+", required=True)
    p.add_argument("--task", default="complex_search", choices=["conventional_search", "complex_search"])
    p.add_argument("--single-domain", default="Video_Games")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds; reports the mean per cell")
    p.add_argument("--configs", help="JSON list of {label, ...train overrides}")
    p.add_argument("--k", type=int)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--output", required=True)
    _add_train_flags(p)

    p = add("synth", cmd_synth, "write a synthetic corpus in the released JSONL layout")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--n-items", type=int, default=200)
    p.add_argument("--n-reviews", type=int, default=2000)
    p.add_argument("--n-users", type=int, default=150)
    p.add_argument("--n-pairs", type=int, default=2000)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    for name, default in (("config", None), ("seed", None), ("key", "parent_asin"), ("log_level", "WARNING")):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("reviewbench: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve_config(args)
        logger.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        code = args.func(args, cfg)
        return code or EXIT_OK
    except UsageError as exc:
        print(f"reviewbench {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        print(f"reviewbench {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"reviewbench {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

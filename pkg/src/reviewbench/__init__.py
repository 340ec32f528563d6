"""Review/metadata contrastive pretraining and product-search benchmarking at desk scale."""

from reviewbench.corpus import CorpusStats, ItemMeta, Review, compute_stats, ingest
from reviewbench.encoder import EmbeddingStore, HashConfig, ToyEncoderParams, encode, hash_tokens
from reviewbench.evalbench import MetricReport, evaluate_search, evaluate_seqrec, ndcg_at_k, recall_at_k
from reviewbench.model import HashingSentenceEncoder
from reviewbench.pipeline import SplitBoundaries, TemporalSplitter, assign_split, build_pair, find_split_boundaries
from reviewbench.retrieval import BM25Retriever, CandidatePool, DenseRetriever, RankedList, build_candidate_pool
from reviewbench.trainer import LossReport, TrainConfig, contrastive_loss_and_grad, train

__version__ = "0.1.0"

__all__ = [
    "BM25Retriever",
    "CandidatePool",
    "CorpusStats",
    "DenseRetriever",
    "EmbeddingStore",
    "HashConfig",
    "HashingSentenceEncoder",
    "ItemMeta",
    "LossReport",
    "MetricReport",
    "RankedList",
    "Review",
    "SplitBoundaries",
    "TemporalSplitter",
    "ToyEncoderParams",
    "TrainConfig",
    "assign_split",
    "build_candidate_pool",
    "build_pair",
    "compute_stats",
    "contrastive_loss_and_grad",
    "encode",
    "evaluate_search",
    "evaluate_seqrec",
    "find_split_boundaries",
    "hash_tokens",
    "ingest",
    "ndcg_at_k",
    "recall_at_k",
    "train",
]

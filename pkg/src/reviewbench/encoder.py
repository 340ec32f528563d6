"""Hashed bag-of-n-grams sentence encoder and the on-disk embedding store.

A sentence is lowercased, split into word tokens, truncated to ``max_tokens``,
and every configured n-gram is hashed into one of ``n_buckets`` rows of a
bucket table. The sentence vector is the mean of its rows times a projection
matrix, L2-normalized to unit length.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import re
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from reviewbench.corpus import ItemMeta

logger = logging.getLogger(__name__)

NULL_BUCKET = 0
_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class HashConfig:
    orders: tuple[int, ...] = (1, 2)
    n_buckets: int = 2**15
    seed: int = 0
    max_tokens: int = 64

    def __post_init__(self):
        if self.n_buckets < 2:
            raise ValueError("n_buckets must leave room for the null bucket")
        if not self.orders or min(self.orders) < 1:
            raise ValueError("n-gram orders must be positive")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_dict(self) -> dict:
        return {"orders": list(self.orders), "n_buckets": self.n_buckets, "seed": self.seed,
                "max_tokens": self.max_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "HashConfig":
        return cls(tuple(d["orders"]), int(d["n_buckets"]), int(d["seed"]), int(d["max_tokens"]))


def tokenize(sentence: str, max_tokens: int | None = None) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    tokens = _TOKEN_RE.findall(sentence.lower())
    if max_tokens is not None:
        tokens = tokens[:max_tokens]
    return tokens


@lru_cache(maxsize=1 << 18)
def _bucket(gram: str, seed: int, n_buckets: int) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    # bucket 0 is reserved for the empty sentence
    return 1 + int.from_bytes(digest, "little") % (n_buckets - 1)


def hash_tokens(sentence: str, config: HashConfig = HashConfig()) -> list[int]:
    tokens = tokenize(sentence, config.max_tokens)
    ids = []
    for n in config.orders:
        for i in range(len(tokens) - n + 1):
            ids.append(_bucket("\x1f".join(tokens[i:i + n]), config.seed, config.n_buckets))
    return ids or [NULL_BUCKET]


@dataclass
class ToyEncoderParams:
    bucket_table: np.ndarray
    projection: np.ndarray
    hash_config: HashConfig = field(default_factory=HashConfig)

    def __post_init__(self):
        self.bucket_table = np.asarray(self.bucket_table, dtype=np.float64)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        V, h = self.bucket_table.shape
        if V != self.hash_config.n_buckets:
            raise ValueError(f"bucket table has {V} rows, hash config expects {self.hash_config.n_buckets}")
        if self.projection.shape[0] != h or self.projection.ndim != 2:
            raise ValueError(f"projection shape {self.projection.shape} incompatible with hidden size {h}")
        if not (np.isfinite(self.bucket_table).all() and np.isfinite(self.projection).all()):
            raise ValueError("non-finite encoder parameters")

    @classmethod
    def initialize(cls, hash_config: HashConfig = HashConfig(), hidden_dim: int = 64, dim: int = 64,
                   seed: int = 0) -> "ToyEncoderParams":
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((hash_config.n_buckets, hidden_dim))
        proj = rng.standard_normal((hidden_dim, dim)) / np.sqrt(hidden_dim)
        return cls(table, proj, hash_config)

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.projection.shape[0]

    def copy(self) -> "ToyEncoderParams":
        return ToyEncoderParams(self.bucket_table.copy(), self.projection.copy(), self.hash_config)

    def hash(self, sentences: Iterable[str]) -> list[list[int]]:
        return [hash_tokens(s, self.hash_config) for s in sentences]


def mean_operator(id_lists: Sequence[Sequence[int]], n_buckets: int) -> sp.csr_matrix:
    """Sparse (n, V) matrix whose row i averages the bucket rows listed in ``id_lists[i]``."""
    lengths = np.fromiter((len(ids) for ids in id_lists), dtype=np.int64, count=len(id_lists))
    indptr = np.zeros(len(id_lists) + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    indices = np.fromiter(itertools.chain.from_iterable(id_lists), dtype=np.int64, count=int(indptr[-1]))
    weights = np.repeat(1.0 / np.maximum(lengths, 1), lengths)
    A = sp.csr_matrix((weights, indices, indptr), shape=(len(id_lists), n_buckets))
    A.sum_duplicates()
    return A


def l2_normalize(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize ``Z``; zero rows map to the first basis vector. Returns (S, norms)."""
    norms = np.linalg.norm(Z, axis=-1, keepdims=True)
    S = np.divide(Z, norms, out=np.zeros_like(Z), where=norms > 0)
    zero = norms[..., 0] == 0
    if zero.any():
        S[zero, 0] = 1.0
    return S, norms


def normalize_backward(S: np.ndarray, norms: np.ndarray, dS: np.ndarray) -> np.ndarray:
    """Gradient through ``s = z / |z|``: ``(I - s s^T) dS / |z|`` row by row."""
    proj = dS - S * np.sum(S * dS, axis=-1, keepdims=True)
    return np.divide(proj, norms, out=np.zeros_like(proj), where=norms > 0)


class EncodeCache:
    """Intermediates of a batch forward pass, kept for the backward pass."""

    def __init__(self, A, X, S, norms):
        self.A, self.X, self.S, self.norms = A, X, S, norms


def encode_ids(params: ToyEncoderParams, id_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, EncodeCache]:
    A = mean_operator(id_lists, params.bucket_table.shape[0])
    X = A @ params.bucket_table
    Z = X @ params.projection
    S, norms = l2_normalize(Z)
    return S, EncodeCache(A, X, S, norms)


def encode_backward(params: ToyEncoderParams, cache: EncodeCache, dS: np.ndarray,
                    grads: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate d(loss)/d(bucket_table, projection) given d(loss)/d(outputs)."""
    if grads is None:
        grads = (np.zeros_like(params.bucket_table), np.zeros_like(params.projection))
    g_table, g_proj = grads
    dZ = normalize_backward(cache.S, cache.norms, dS)
    g_proj += cache.X.T @ dZ
    dX = dZ @ params.projection.T
    g_table += cache.A.T @ dX
    return g_table, g_proj


def encode_batch(params: ToyEncoderParams, sentences: Sequence[str], chunk: int = 4096) -> np.ndarray:
    out = np.empty((len(sentences), params.dim))
    for start in range(0, len(sentences), chunk):
        ids = params.hash(sentences[start:start + chunk])
        out[start:start + chunk] = encode_ids(params, ids)[0]
    return out


def encode(params: ToyEncoderParams, sentence: str) -> np.ndarray:
    return encode_ids(params, [hash_tokens(sentence, params.hash_config)])[0][0]


# ---------------------------------------------------------------------------
# embedding store

MAGIC = b"RVBEMBED"
VERSION = 1
_HEADER = struct.Struct("<8sIIQQ")  # magic, version, d, count, id-section bytes


class EmbeddingStore:
    """Immutable map from id to unit-norm float32 vector, sorted by id."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, *, check: bool = True):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ValueError(f"{len(ids)} ids but vector array shape {vectors.shape}")
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        self.ids = tuple(ids[i] for i in order)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in embedding store")
        self.vectors = np.ascontiguousarray(vectors[order]) if order != list(range(len(ids))) else vectors
        self.dim = vectors.shape[1]
        if check and len(self.ids):
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("embedding store vectors must have unit norm")
        self._index = {k: i for i, k in enumerate(self.ids)}
        self.duplicates = 0

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item_id):
        return item_id in self._index

    def __getitem__(self, item_id) -> np.ndarray:
        return self.vectors[self._index[item_id]]

    def rows(self, item_ids: Sequence[str]) -> np.ndarray:
        return self.vectors[[self._index[i] for i in item_ids]]

    @property
    def count(self) -> int:
        return len(self.ids)

    def to_bytes(self) -> bytes:
        id_blob = b"".join(struct.pack("<I", len(b)) + b for b in (i.encode("utf-8") for i in self.ids))
        pad = (-(_HEADER.size + len(id_blob))) % 4
        header = _HEADER.pack(MAGIC, VERSION, self.dim, len(self.ids), len(id_blob) + pad)
        return header + id_blob + b"\0" * pad + self.vectors.astype("<f4").tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, mmap: bool = False) -> "EmbeddingStore":
        path = Path(path)
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            magic, version, d, count, id_bytes = _HEADER.unpack(head)
            if magic != MAGIC:
                raise ValueError(f"{path} is not an embedding store")
            if version != VERSION:
                raise ValueError(f"unsupported store version {version}")
            blob = fh.read(id_bytes)
        ids, pos = [], 0
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            ids.append(blob[pos + 4:pos + 4 + n].decode("utf-8"))
            pos += 4 + n
        offset = _HEADER.size + id_bytes
        if mmap and count:
            vectors = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(count, d))
        else:
            raw = path.read_bytes()[offset:offset + 4 * count * d]
            vectors = np.frombuffer(raw, dtype="<f4").reshape(count, d).copy()
        return cls(ids, vectors, check=False)

    @classmethod
    def from_text(cls, path) -> "EmbeddingStore":
        """Import ``id<TAB>v1,v2,...`` lines; vectors are L2-normalized on the way in."""
        ids, rows = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                key, values = line.rstrip("\n").split("\t")
                ids.append(key)
                rows.append([float(v) for v in values.split(",")])
        if not rows:
            raise ValueError(f"{path}: no vectors")
        M, _ = l2_normalize(np.asarray(rows, dtype=np.float64))
        return cls.from_mapping(dict(zip(ids, M)), M.shape[1])

    @classmethod
    def from_mapping(cls, mapping: dict, dim: int) -> "EmbeddingStore":
        ids = list(mapping)
        vecs = np.asarray([mapping[i] for i in ids], dtype=np.float32).reshape(len(ids), dim)
        return cls(ids, vecs)


def embed_corpus(params: ToyEncoderParams, metadata: Iterable[ItemMeta], path=None,
                 batch: int = 4096) -> EmbeddingStore:
    """Encode every item's flattened metadata; a repeated item id keeps its last record."""
    from reviewbench.pipeline import metadata_text

    texts: dict[str, str] = {}
    duplicates = 0
    for meta in metadata:
        if meta.item_id in texts:
            duplicates += 1
            del texts[meta.item_id]
        texts[meta.item_id] = metadata_text(meta)
    if duplicates:
        logger.warning("embed_corpus: %d duplicate item id(s); last record kept", duplicates)
    ids = sorted(texts)
    vectors = encode_batch(params, [texts[i] for i in ids], chunk=batch)
    store = EmbeddingStore(ids, vectors.astype(np.float32), check=False)
    store.duplicates = duplicates
    if path is not None:
        store.save(path)
    return store

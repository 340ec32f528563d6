"""Estimator front-end for the hashed sentence encoder."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from reviewbench.encoder import EmbeddingStore, ToyEncoderParams, embed_corpus, encode_batch
from reviewbench.pipeline import TrainingPair
from reviewbench.trainer import TrainConfig, train


def _as_pairs(X) -> list[TrainingPair]:
    pairs = []
    for row in X:
        if isinstance(row, TrainingPair):
            pairs.append(row)
        else:
            if isinstance(row, str) or len(row) not in (2, 3):
                raise ValueError(f"expected (context, metadata[, domain]), got {row!r}")
            context, metadata = row[0], row[1]
            domain = row[2] if len(row) > 2 else ""
            pairs.append(TrainingPair(str(context), str(metadata), "", domain, 0))
    return pairs


class HashingSentenceEncoder(TransformerMixin, BaseEstimator):
    """Two-tower (shared-weight) sentence encoder trained contrastively.

    ``fit`` takes training pairs, either :class:`TrainingPair` objects or
    ``(context, metadata[, domain])`` tuples. ``transform`` maps sentences to
    unit vectors of size ``dim``. ``epochs=0`` gives the untrained random
    projection encoder.

    >>> enc = HashingSentenceEncoder(dim=8, hidden_dim=8, n_buckets=64, epochs=0)
    >>> enc.fit([("red shoes for running", "running shoe red")]).transform(["red"]).shape
    (1, 8)
    """

    def __init__(self, tau=0.05, lam=0.1, batch_size=32, learning_rate=20.0, epochs=5, seed=0,
                 domain_filter=None, init_mode="scratch", aux_epochs=1, loss_reduction="mean",
                 symmetric=False, mask_rate=0.15, n_negatives=20, hidden_dim=64, dim=64,
                 n_buckets=2**14, ngram_orders=(1, 2), max_tokens=64, hash_seed=0):
        self.tau = tau
        self.lam = lam
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed
        self.domain_filter = domain_filter
        self.init_mode = init_mode
        self.aux_epochs = aux_epochs
        self.loss_reduction = loss_reduction
        self.symmetric = symmetric
        self.mask_rate = mask_rate
        self.n_negatives = n_negatives
        self.hidden_dim = hidden_dim
        self.dim = dim
        self.n_buckets = n_buckets
        self.ngram_orders = ngram_orders
        self.max_tokens = max_tokens
        self.hash_seed = hash_seed

    def to_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    @classmethod
    def from_config(cls, config: TrainConfig) -> "HashingSentenceEncoder":
        return cls(**{f.name: getattr(config, f.name) for f in fields(TrainConfig)})

    def fit(self, X, y=None):
        config = self.to_config()
        pairs = _as_pairs(X)
        if config.epochs == 0 and config.init_mode == "scratch":
            self.params_ = ToyEncoderParams.initialize(config.hash_config, config.hidden_dim, config.dim, config.seed)
            self.history_ = []
        else:
            self.params_, self.history_ = train(config, pairs)
        return self

    @classmethod
    def from_params(cls, params: ToyEncoderParams, **kwargs) -> "HashingSentenceEncoder":
        hc = params.hash_config
        est = cls(hidden_dim=params.hidden_dim, dim=params.dim, n_buckets=hc.n_buckets, ngram_orders=hc.orders,
                  max_tokens=hc.max_tokens, hash_seed=hc.seed, **kwargs)
        est.params_ = params
        est.history_ = []
        return est

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        if isinstance(X, str):
            raise TypeError("transform expects a sequence of sentences, not a single string")
        return encode_batch(self.params_, [str(s) for s in X])

    def embed_items(self, metadata, path=None) -> EmbeddingStore:
        check_is_fitted(self, "params_")
        return embed_corpus(self.params_, metadata, path)

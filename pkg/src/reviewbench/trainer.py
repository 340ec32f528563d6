"""Contrastive review/metadata training of the hashed encoder.

Objective per batch: in-batch softmax contrastive loss between context and
metadata embeddings plus ``lam`` times a masked-bucket denoising loss. All
gradients are analytic; :func:`grad_check` compares them with central
differences.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from reviewbench.encoder import (
    NULL_BUCKET,
    EmbeddingStore,
    HashConfig,
    ToyEncoderParams,
    encode_backward,
    l2_normalize,
    mean_operator,
    normalize_backward,
    EncodeCache,
)
from reviewbench.pipeline import TrainingPair

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    tau: float = 0.05
    lam: float = 0.1
    batch_size: int = 32
    learning_rate: float = 20.0
    epochs: int = 5
    seed: int = 0
    domain_filter: tuple[str, ...] | None = None
    init_mode: str = "scratch"
    aux_epochs: int = 1
    loss_reduction: str = "mean"
    symmetric: bool = False
    mask_rate: float = 0.15
    n_negatives: int = 20
    hidden_dim: int = 64
    dim: int = 64
    n_buckets: int = 2**14
    ngram_orders: tuple[int, ...] = (1, 2)
    max_tokens: int = 64
    hash_seed: int = 0

    def __post_init__(self):
        if self.domain_filter is not None:
            self.domain_filter = tuple(sorted(self.domain_filter))
        self.ngram_orders = tuple(self.ngram_orders)
        self.validate()

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for in-batch negatives")
        if self.init_mode not in ("scratch", "from_aux_pretrained"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown loss_reduction {self.loss_reduction!r}")
        if not 0 < self.mask_rate < 1:
            raise ValueError("mask_rate must be in (0, 1)")
        if self.epochs < 0 or self.aux_epochs < 0 or self.n_negatives < 1:
            raise ValueError("epochs, aux_epochs must be >= 0 and n_negatives >= 1")

    @property
    def hash_config(self) -> HashConfig:
        return HashConfig(self.ngram_orders, self.n_buckets, self.hash_seed, self.max_tokens)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["ngram_orders"] = list(self.ngram_orders)
        d["domain_filter"] = list(self.domain_filter) if self.domain_filter is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LossReport:
    l_cl: float
    l_pt: float
    l_total: float
    grad_norm: float
    weight: float = 0.0
    epoch: int = 0
    phase: str = "joint"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def contrastive_loss_and_grad(contexts: np.ndarray, metadatas: np.ndarray, tau: float = 0.05,
                              reduction: str = "mean", symmetric: bool = False):
    """In-batch softmax contrastive loss and its gradients.

    Row i scores context i against every metadata in the batch; the matching
    metadata is the positive. Returns ``(loss, d_contexts, d_metadatas)``.
    With ``symmetric`` the metadata-to-context direction is added and the two
    directions averaged.
    """
    C = np.asarray(contexts, dtype=np.float64)
    M = np.asarray(metadatas, dtype=np.float64)
    if C.ndim != 2 or C.shape != M.shape:
        raise ValueError(f"context/metadata shapes differ: {C.shape} vs {M.shape}")
    B = C.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs at least 2 pairs")
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not (np.isfinite(C).all() and np.isfinite(M).all()):
        raise ValueError("non-finite embedding in batch")
    logits = C @ M.T / tau
    scale = 1.0 / B if reduction == "mean" else 1.0

    def one_direction(L):
        shifted = L - L.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.sum(lse - np.diag(shifted)))
        P = np.exp(shifted - lse[:, None])
        P[np.diag_indices(B)] -= 1.0
        return loss, P

    loss, G = one_direction(logits)
    if symmetric:
        loss_t, G_t = one_direction(logits.T)
        loss = 0.5 * (loss + loss_t)
        G = 0.5 * (G + G_t.T)
    G *= scale / tau
    return loss * scale, G @ M, G.T @ C


@dataclass
class MaskedTargets:
    """Masked-bucket prediction problems for the auxiliary loss.

    ``candidates[n, 0]`` is the true bucket of prediction ``n`` and the
    remaining columns its sampled negatives; ``visible[n]`` are the buckets
    of the sentence with the masked ones removed.
    """

    visible: list[list[int]]
    candidates: np.ndarray
    skipped: int = 0

    def __len__(self):
        return len(self.visible)


def make_masked_targets(id_lists: Sequence[Sequence[int]], n_buckets: int, rng: np.random.Generator,
                        mask_rate: float = 0.15, n_negatives: int = 20) -> MaskedTargets:
    visible, cands = [], []
    skipped = 0
    for ids in id_lists:
        ids = [i for i in ids if i != NULL_BUCKET]
        n = len(ids)
        if n < 2:
            skipped += 1
            continue
        n_mask = min(n - 1, max(1, int(round(mask_rate * n))))
        masked = set(rng.choice(n, size=n_mask, replace=False).tolist())
        keep = [b for p, b in enumerate(ids) if p not in masked]
        for p in sorted(masked):
            true = ids[p]
            neg = rng.integers(1, n_buckets - 1, size=n_negatives)
            neg = neg + (neg >= true)
            visible.append(keep)
            cands.append(np.concatenate(([true], neg)))
    cand = np.asarray(cands, dtype=np.int64).reshape(len(cands), n_negatives + 1)
    return MaskedTargets(visible, cand, skipped)


def _aux_forward(params: ToyEncoderParams, A_vis, candidates: np.ndarray, want_grad: bool):
    N, K = candidates.shape
    h = params.bucket_table.shape[1]
    X = A_vis @ params.bucket_table
    U, norms = l2_normalize(X @ params.projection)
    rows = params.bucket_table[candidates.ravel()]  # (N*K, h)
    W = (rows @ params.projection).reshape(N, K, -1)
    scores = np.einsum("nkd,nd->nk", W, U)
    shifted = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[:, 0]))
    if not want_grad:
        return loss, None
    dscores = np.exp(shifted - lse[:, None])
    dscores[:, 0] -= 1.0
    dscores /= N
    dU = np.einsum("nk,nkd->nd", dscores, W)
    dW = (dscores[:, :, None] * U[:, None, :]).reshape(N * K, -1)
    g_proj = rows.T @ dW
    # scatter-add candidate row gradients into the table
    scatter = sp.csr_matrix((np.ones(N * K), (candidates.ravel(), np.arange(N * K))),
                            shape=(params.bucket_table.shape[0], N * K))
    g_table = np.asarray(scatter @ (dW @ params.projection.T)).reshape(-1, h)
    encode_backward(params, EncodeCache(A_vis, X, U, norms), dU, (g_table, g_proj))
    return loss, (g_table, g_proj)


def auxiliary_loss(targets: MaskedTargets, params: ToyEncoderParams):
    """Sampled-softmax masked-bucket loss: mean NLL of each true bucket among its candidates.

    A candidate bucket is scored by the dot product of its projected table row
    with the encoding of the visible buckets. Returns ``(l_pt, (g_table, g_proj))``.
    """
    zero = (np.zeros_like(params.bucket_table), np.zeros_like(params.projection))
    if len(targets) == 0:
        return 0.0, zero
    A_vis = mean_operator(targets.visible, params.bucket_table.shape[0])
    return _aux_forward(params, A_vis, targets.candidates, True)


def total_loss(l_cl: float, l_pt: float, lam: float) -> float:
    if not (math.isfinite(l_cl) and math.isfinite(l_pt) and math.isfinite(lam)):
        raise ValueError("non-finite loss term")
    return l_cl + lam * l_pt


class BatchObjective:
    """Combined loss for one fixed batch, with sparse operators built once.

    Used both by the training loop and by finite-difference checks, which call
    it many times on the same batch.
    """

    def __init__(self, ctx_ids, meta_ids, targets: MaskedTargets | None, n_buckets: int, tau: float,
                 lam: float, reduction: str = "mean", symmetric: bool = False):
        self.B = len(ctx_ids)
        self.A = mean_operator(list(ctx_ids) + list(meta_ids), n_buckets)
        self.targets = targets if targets is not None and len(targets) else None
        self.A_vis = mean_operator(self.targets.visible, n_buckets) if self.targets else None
        self.tau, self.lam, self.reduction, self.symmetric = tau, lam, reduction, symmetric

    def __call__(self, params: ToyEncoderParams, want_grad: bool = True, contrastive: bool = True):
        l_cl = l_pt = 0.0
        g_table = np.zeros_like(params.bucket_table) if want_grad else None
        g_proj = np.zeros_like(params.projection) if want_grad else None
        if contrastive:
            X = self.A @ params.bucket_table
            S, norms = l2_normalize(X @ params.projection)
            l_cl, dC, dM = contrastive_loss_and_grad(S[:self.B], S[self.B:], self.tau, self.reduction,
                                                     self.symmetric)
            if want_grad:
                encode_backward(params, EncodeCache(self.A, X, S, norms), np.vstack([dC, dM]), (g_table, g_proj))
        weight = self.lam if contrastive else 1.0
        if self.targets is not None and weight > 0:
            l_pt, g = _aux_forward(params, self.A_vis, self.targets.candidates, want_grad)
            if want_grad:
                g_table += weight * g[0]
                g_proj += weight * g[1]
        l_total = total_loss(l_cl, l_pt, weight)
        grad_norm = math.sqrt(float(np.sum(g_table**2) + np.sum(g_proj**2))) if want_grad else 0.0
        report = LossReport(l_cl, l_pt, l_total, grad_norm, weight, phase="joint" if contrastive else "aux")
        return report, ((g_table, g_proj) if want_grad else None)


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|); absolute difference where both are below ``floor``."""
    a, n = np.abs(analytic), np.abs(numeric)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(a, n)
    return np.where(scale > floor, diff / np.where(scale > floor, scale, 1.0), diff)


def numeric_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. every coordinate of ``arrays`` (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = f()
            flat[i] = old - eps
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def grad_check(params: ToyEncoderParams, objective: BatchObjective, eps: float = 1e-5,
               analytic: Callable | None = None, contrastive: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients of the total loss.

    ``analytic`` overrides the gradient under test (``params -> (g_table, g_proj)``).
    """
    p = params.copy()
    if analytic is None:
        grads = objective(p, want_grad=True, contrastive=contrastive)[1]
    else:
        grads = analytic(p)
    numeric = numeric_gradient(lambda: objective(p, want_grad=False, contrastive=contrastive)[0].l_total,
                               [p.bucket_table, p.projection], eps)
    return max(float(relative_error(g, n).max()) for g, n in zip(grads, numeric))


# ---------------------------------------------------------------------------
# training loop


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate(chunks[-2:])
        chunks.pop()
    return [c for c in chunks if len(c) >= 2]


def _check_finite(report: LossReport, where: str) -> None:
    if not (math.isfinite(report.l_total) and math.isfinite(report.grad_norm)):
        raise TrainingError(f"non-finite loss during {where}: {report}")


def _mean_report(reports: list[LossReport], epoch: int, phase: str) -> LossReport:
    n = len(reports)
    l_cl = sum(r.l_cl for r in reports) / n
    l_pt = sum(r.l_pt for r in reports) / n
    weight = reports[0].weight
    return LossReport(l_cl, l_pt, l_cl + weight * l_pt, sum(r.grad_norm for r in reports) / n, weight, epoch, phase)


def filter_pairs(pairs: Iterable[TrainingPair], domain_filter) -> list[TrainingPair]:
    if domain_filter is None:
        return list(pairs)
    allowed = set(domain_filter)
    return [p for p in pairs if p.domain in allowed]


def train(config: TrainConfig, pairs: Iterable[TrainingPair], params: ToyEncoderParams | None = None,
          callback: Callable[[LossReport], None] | None = None):
    """Train the encoder with plain SGD; returns ``(params, history)``.

    ``history[0]`` evaluates the starting point; each later entry evaluates
    the parameters at the end of an epoch over a fixed batching of the data,
    so entries are directly comparable. With ``init_mode="from_aux_pretrained"``
    the contrastive phase is preceded by ``aux_epochs`` of masked-bucket
    training on the distinct metadata sentences (entries with phase ``aux``).
    """
    config.validate()
    data = filter_pairs(pairs, config.domain_filter)
    if len(data) < 2:
        raise TrainingError(f"need at least 2 training pairs after domain filter, got {len(data)}")
    hcfg = config.hash_config
    if params is None:
        params = ToyEncoderParams.initialize(hcfg, config.hidden_dim, config.dim, config.seed)
    else:
        params = params.copy()
    rng = np.random.default_rng([config.seed, 1])
    ctx_ids = params.hash(p.context for p in data)
    meta_ids = params.hash(p.metadata for p in data)
    history: list[LossReport] = []

    def record(report: LossReport):
        history.append(report)
        logger.info("epoch %d [%s] l_cl=%.5f l_pt=%.5f l_total=%.5f |g|=%.4g", report.epoch, report.phase,
                    report.l_cl, report.l_pt, report.l_total, report.grad_norm)
        if callback is not None:
            callback(report)

    def run(obj: BatchObjective, where: str, **kw):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out = obj(params, **kw)
        except ValueError as exc:
            raise TrainingError(f"training diverged during {where}: {exc}") from exc
        _check_finite(out[0], where)
        return out

    def step(obj: BatchObjective, contrastive: bool, where: str) -> LossReport:
        report, (g_table, g_proj) = run(obj, where, contrastive=contrastive)
        params.bucket_table -= config.learning_rate * g_table
        params.projection -= config.learning_rate * g_proj
        return report

    def objective(idx, sample_rng, contrastive=True) -> BatchObjective:
        c = [ctx_ids[i] for i in idx]
        m = [meta_ids[i] for i in idx]
        lam = config.lam if contrastive else 1.0
        targets = None
        if lam > 0:
            source = (c + m) if contrastive else m
            targets = make_masked_targets(source, hcfg.n_buckets, sample_rng, config.mask_rate, config.n_negatives)
        return BatchObjective(c if contrastive else [], m if contrastive else [], targets, hcfg.n_buckets,
                              config.tau, lam, config.loss_reduction, config.symmetric)

    def evaluate(idx_list, epoch, contrastive, phase, step_reports=None) -> LossReport:
        # gradient norm: mean over the epoch's update steps, or exact at the starting point
        eval_rng = np.random.default_rng([config.seed, 2])
        reports = []
        for idx in idx_list:
            rep = run(objective(idx, eval_rng, contrastive), f"evaluation (epoch {epoch})",
                      want_grad=step_reports is None, contrastive=contrastive)[0]
            reports.append(rep)
        mean = _mean_report(reports, epoch, phase)
        if step_reports:
            gn = sum(r.grad_norm for r in step_reports) / len(step_reports)
            mean = LossReport(mean.l_cl, mean.l_pt, mean.l_total, gn, mean.weight, epoch, phase)
        return mean

    if config.init_mode == "from_aux_pretrained" and config.aux_epochs > 0:
        # one index per distinct metadata sentence
        first: dict[str, int] = {}
        for i, p in enumerate(data):
            first.setdefault(p.metadata, i)
        meta_idx = np.array(sorted(first.values()))
        fixed = _batches(meta_idx, config.batch_size)
        if fixed:
            record(evaluate(fixed, 0, False, "aux"))
            for epoch in range(1, config.aux_epochs + 1):
                steps = [step(objective(idx, rng, False), False, f"aux epoch {epoch}")
                         for idx in _batches(rng.permutation(meta_idx), config.batch_size)]
                record(evaluate(fixed, epoch, False, "aux", steps))

    fixed = _batches(np.arange(len(data)), config.batch_size)
    record(evaluate(fixed, 0, True, "joint"))
    for epoch in range(1, config.epochs + 1):
        steps = [step(objective(idx, rng, True), True, f"epoch {epoch}")
                 for idx in _batches(rng.permutation(len(data)), config.batch_size)]
        record(evaluate(fixed, epoch, True, "joint", steps))
    return params, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, params: ToyEncoderParams, config: TrainConfig, history: Sequence[LossReport]) -> None:
    """Write ``bucket_table.emb`` and ``projection.emb`` (store format) plus ``checkpoint.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, mat in (("bucket_table", params.bucket_table), ("projection", params.projection)):
        width = len(str(mat.shape[0]))
        ids = [str(i).zfill(width) for i in range(mat.shape[0])]
        EmbeddingStore(ids, mat.astype(np.float32), check=False).save(d / f"{name}.emb")
    sidecar = {
        "config": config.to_dict(),
        "hash_config": params.hash_config.to_dict(),
        "history": [r.to_dict() for r in history],
    }
    (d / "checkpoint.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[ToyEncoderParams, TrainConfig, list[LossReport]]:
    d = Path(directory)
    sidecar = json.loads((d / "checkpoint.json").read_text())
    table = EmbeddingStore.load(d / "bucket_table.emb").vectors.astype(np.float64)
    proj = EmbeddingStore.load(d / "projection.emb").vectors.astype(np.float64)
    params = ToyEncoderParams(table, proj, HashConfig.from_dict(sidecar["hash_config"]))
    history = [LossReport(**r) for r in sidecar["history"]]
    return params, TrainConfig.from_dict(sidecar["config"]), history

"""AdamW, class-balanced mini-batches and the per-fold training loop."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import DegenerateDataError, MetricUndefinedError, NumericError, ParameterError
from .graph import GraphBatch, LesionGraph
from .metrics import roc_auc
from .model import ModelConfig, ModelParams, forward_batch, init_params, predict_proba

log = logging.getLogger(__name__)


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named consumer of randomness."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *extra]))


@dataclass
class OptimState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta.data)
            state.v[name] = np.zeros_like(theta.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta.data = theta.data - state.lr * (step + state.weight_decay * theta.data)


def balanced_batches(labels: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of mini-batches with near-equal class counts.

    Every majority-class index appears once (the last batch is topped up with
    repeats); the minority class is cycled through shuffled passes as often
    as needed.  Each batch holds ceil(b/2) majority and floor(b/2) minority.
    """
    y = np.asarray(labels).astype(int).ravel()
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateDataError("balanced sampling needs both classes")
    if batch_size < 2:
        raise ParameterError(f"balanced batches need batch_size >= 2, got {batch_size}")
    major, minor = (pos, neg) if pos.size >= neg.size else (neg, pos)
    n_major = (batch_size + 1) // 2
    n_minor = batch_size // 2
    n_batches = math.ceil(major.size / n_major)

    major_seq = rng.permutation(major)
    short = n_batches * n_major - major.size
    if short:
        major_seq = np.concatenate([major_seq, rng.choice(major, size=short, replace=True)])
    need = n_batches * n_minor
    passes = [rng.permutation(minor) for _ in range(math.ceil(need / minor.size))]
    minor_seq = np.concatenate(passes)[:need]

    batches = []
    for b in range(n_batches):
        idx = np.concatenate([major_seq[b * n_major:(b + 1) * n_major], minor_seq[b * n_minor:(b + 1) * n_minor]])
        batches.append(rng.permutation(idx))
    return batches


def plain_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    balanced_sampling: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or (self.balanced_sampling and self.batch_size < 2):
            raise ParameterError(f"invalid batch size {self.batch_size}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ParameterError("lr must be positive and weight_decay non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    best_epoch: int

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_auc"])
            for rec in self.history:
                w.writerow([rec.epoch, f"{rec.train_loss:.6f}", f"{rec.val_auc:.6f}"])


def batch_loss(batch: GraphBatch, params: ModelParams, mode: str, rng) -> Tensor:
    out = forward_batch(batch, params, mode, rng)
    return ad.bce_loss(ad.sigmoid(out.logits), batch.labels[:, None])


def _val_score(val_graphs: Sequence[LesionGraph], params: ModelParams) -> float:
    probs = predict_proba(val_graphs, params)
    labels = np.array([g.label for g in val_graphs])
    try:
        return roc_auc(probs, labels)
    except MetricUndefinedError:
        # single-class validation slice: fall back to negative BCE
        pc = np.clip(probs, 1e-12, 1 - 1e-12)
        return float(np.mean(labels * np.log(pc) + (1 - labels) * np.log(1 - pc)))


def train_fold(train_graphs: Sequence[LesionGraph], val_graphs: Sequence[LesionGraph],
               model_config: ModelConfig, train_config: TrainConfig, fold_index: int = 0) -> TrainResult:
    """Train on ``train_graphs`` and keep the epoch with the best validation AUC.

    Randomness comes from streams keyed by ``train_config.seed + fold_index``.
    Ties in validation AUC keep the earlier epoch.
    """
    labels = np.array([g.label for g in train_graphs])
    if len(np.unique(labels)) < 2:
        raise DegenerateDataError("training set must contain both classes")
    seed = train_config.seed + fold_index
    params = init_params(model_config, substream(seed, "init"))
    batch_rng = substream(seed, "batches")
    drop_rng = substream(seed, "dropout")
    named = params.named()
    state = OptimState(lr=train_config.lr, weight_decay=train_config.weight_decay)

    best_score = -math.inf
    best = params.copy()
    best_epoch = 0
    history: list[EpochRecord] = []
    for epoch in range(1, train_config.epochs + 1):
        if train_config.balanced_sampling:
            batches = balanced_batches(labels, train_config.batch_size, batch_rng)
        else:
            batches = plain_batches(len(train_graphs), train_config.batch_size, batch_rng)
        losses = []
        for idx in batches:
            batch = GraphBatch([train_graphs[i] for i in idx])
            with Tape() as tape:
                loss = batch_loss(batch, params, "train", drop_rng)
            grads = tape.backward(loss)
            try:
                adamw_step(named, {k: grads[t] for k, t in named.items() if t in grads}, state)
            except NumericError as exc:
                raise NumericError(f"fold {fold_index}, epoch {epoch}: {exc}") from exc
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        score = _val_score(val_graphs, params) if val_graphs else -train_loss
        history.append(EpochRecord(epoch, train_loss, score))
        if score > best_score:
            best_score = score
            best = params.copy()
            best_epoch = epoch
        log.debug("fold %d epoch %d loss %.4f val %.4f", fold_index, epoch, train_loss, score)
    best.extra = {"fold": fold_index, "best_epoch": best_epoch, "val_auc": best_score}
    return TrainResult(best, history, best_epoch)

"""Self-pruning: score lesions with a learnable projection and keep the top fraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ParameterError, ShapeError

NORM_EPS = 1e-12


@dataclass
class PruneResult:
    scores: np.ndarray  # (n,) post-sigmoid importance
    retained: np.ndarray  # kept node indices, ascending
    gated_features: Tensor  # (m, d) kept rows scaled by their score


def retention_count(n: int, r: float) -> int:
    """ceil(n * r), robust to binary rounding of decimal ratios such as 0.3."""
    if not 0.0 < r <= 1.0:
        raise ParameterError(f"retention ratio must lie in (0, 1], got {r}")
    if n < 1:
        raise ParameterError(f"need at least one node, got {n}")
    return min(n, max(1, math.ceil(round(n * r, 9))))


def compute_scores(z_hat: Tensor, p: Tensor) -> Tensor:
    """sigmoid(Z p / |p|) as an (n, 1) column."""
    if p.shape != (z_hat.cols, 1):
        raise ShapeError(f"projection vector must be ({z_hat.cols}, 1), got {p.shape}")
    pn = ad.norm(p)
    if pn.item() == 0.0:
        raise NumericError("projection vector has zero norm")
    return ad.sigmoid((z_hat @ p) / ad.clamp_min(pn, NORM_EPS))


def top_r_select(scores, r: float) -> np.ndarray:
    """Indices of the ceil(N r) largest scores, ties to the smaller index; ascending order."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    m = retention_count(s.size, r)
    order = np.lexsort((np.arange(s.size), -s))
    return np.sort(order[:m])


def segment_top_r(scores: np.ndarray, node_graph: np.ndarray, sizes: np.ndarray, r: float) -> np.ndarray:
    """:func:`top_r_select` applied independently inside each graph of a batch."""
    n = scores.size
    idx = np.arange(n)
    order = np.lexsort((idx, -scores, node_graph))
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    rank = np.empty(n, dtype=np.intp)
    rank[order] = idx - np.repeat(starts, sizes)
    keep_n = np.array([retention_count(int(s), r) for s in sizes])
    return np.flatnonzero(rank < keep_n[node_graph])


def apply_gate(z_hat: Tensor, scores: Tensor, retained) -> Tensor:
    """Rows of ``z_hat`` at ``retained``, each multiplied by its score."""
    retained = np.asarray(retained, dtype=np.intp)
    return ad.take_rows(z_hat, retained) * ad.take_rows(scores, retained)


def self_prune(z_hat: Tensor, p: Tensor, r: float, retained=None) -> PruneResult:
    """Full SPM on one graph.  Pass ``retained`` to freeze the selection."""
    scores = compute_scores(z_hat, p)
    if retained is None:
        retained = top_r_select(scores.data[:, 0], r)
    gated = apply_gate(z_hat, scores, retained)
    return PruneResult(scores.data[:, 0].copy(), np.asarray(retained), gated)

"""Patient lesion graphs: symmetric kNN connectivity and Gaussian edge weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor
from .errors import InputError, ParameterError

REGIONS = ("periventricular", "subcortical", "juxtacortical", "infratentorial")

# smallest positive normal double; keeps underflowed weights inside (0, 1]
WEIGHT_TINY = np.finfo(np.float64).tiny


@dataclass
class Lesion:
    position: np.ndarray
    features: np.ndarray
    region: str = "subcortical"

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.position.shape != (3,):
            raise InputError(f"lesion position must be a 3-vector, got shape {self.position.shape}")
        if np.any(self.position < 0.0) or np.any(self.position > 1.0):
            raise InputError(f"lesion position {self.position.tolist()} outside [0, 1]^3")
        if self.region not in REGIONS:
            raise InputError(f"unknown region {self.region!r}")


@dataclass(frozen=True)
class GraphConfig:
    k: int = 5
    tau: float = 0.01
    distance_floor: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.distance_floor <= 1.0:
            raise ParameterError(f"distance_floor must lie in [0, 1], got {self.distance_floor}")


@dataclass
class LesionGraph:
    """One patient: lesions as nodes, weighted undirected edges stored with i < j."""

    lesions: list[Lesion]
    edges: list[tuple[int, int, float]]
    label: int
    patient_id: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.lesions) < 1:
            raise InputError("a lesion graph needs at least one lesion")

    @property
    def n_nodes(self) -> int:
        return len(self.lesions)

    @cached_property
    def features(self) -> np.ndarray:
        return np.stack([les.features for les in self.lesions])

    @cached_property
    def positions(self) -> np.ndarray:
        return np.stack([les.position for les in self.lesions])

    @property
    def regions(self) -> list[str]:
        return [les.region for les in self.lesions]

    @classmethod
    def build(cls, lesions: Sequence[Lesion], label: int, cfg: GraphConfig | None = None,
              patient_id: str = "") -> "LesionGraph":
        cfg = cfg or GraphConfig()
        return cls(list(lesions), build_knn_edges(lesions, cfg), int(label), patient_id)

    def weighted_adjacency(self) -> np.ndarray:
        n = self.n_nodes
        a = np.zeros((n, n))
        for i, j, w in self.edges:
            a[i, j] = a[j, i] = w
        return a


def edge_weight(si, sj, tau: float, distance_floor: float = 0.0) -> float:
    """exp(-|si - sj|^2 / tau^2), clamped below by ``distance_floor``."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    d2 = float(np.sum((np.asarray(si, dtype=np.float64) - np.asarray(sj, dtype=np.float64)) ** 2))
    return max(math.exp(-d2 / (tau * tau)), distance_floor, WEIGHT_TINY)


def _edge_weights(d2: np.ndarray, cfg: GraphConfig) -> np.ndarray:
    w = np.exp(-d2 / (cfg.tau * cfg.tau))
    return np.maximum(w, max(cfg.distance_floor, WEIGHT_TINY))


def knn_pairs(positions: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Union-symmetrised kNN pairs (i < j); distance ties go to the lower index."""
    n = positions.shape[0]
    if n < 2:
        return []
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    kk = min(k, n - 1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    rows = np.repeat(np.arange(n), kk)
    cols = order.ravel()
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    keys = np.unique(lo * n + hi)
    return [(int(key // n), int(key % n)) for key in keys]


def build_knn_edges(lesions: Sequence[Lesion], cfg: GraphConfig) -> list[tuple[int, int, float]]:
    """Edges (i, j, w) with i < j, present when either endpoint is in the other's kNN."""
    if len(lesions) == 0:
        raise InputError("cannot build a graph from an empty lesion list")
    pos = np.stack([les.position for les in lesions])
    pairs = knn_pairs(pos, cfg.k)
    if not pairs:
        return []
    pi = np.array(pairs)
    d = pos[pi[:, 0]] - pos[pi[:, 1]]
    w = _edge_weights(np.einsum("ij,ij->i", d, d), cfg)
    return [(int(i), int(j), float(x)) for (i, j), x in zip(pairs, w)]


def normalized_adjacency(graph: LesionGraph) -> Tensor:
    """Dense D^-1/2 (A_w + I) D^-1/2 with D the degree of A_w + I."""
    a = graph.weighted_adjacency() + np.eye(graph.n_nodes)
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return Tensor(a * dinv[:, None] * dinv[None, :])


# -- batched structure ---------------------------------------------------------------

# Operator entries below this are dropped when building batched matrices.  They
# are numerically invisible next to the unit self-loop, and products of them
# fall into the subnormal range, which slows every kernel they touch.
OPERATOR_FLUSH = 1e-100


def _csr_parts(rows, cols, vals, n):
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    keep = vals >= OPERATOR_FLUSH
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))])
    return cols.astype(np.int32), vals, indptr.astype(np.int32)


def _graph_parts(graph: LesionGraph) -> dict:
    parts = graph._cache.get("parts")
    if parts is not None:
        return parts
    n = graph.n_nodes
    if graph.edges:
        e = np.array(graph.edges, dtype=np.float64)
        i, j, w = e[:, 0].astype(np.intp), e[:, 1].astype(np.intp), e[:, 2]
    else:
        i = j = np.zeros(0, dtype=np.intp)
        w = np.zeros(0)
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    ww = np.concatenate([w, w])
    order = np.lexsort((dst, src))
    src, dst, ww = src[order], dst[order], ww[order]

    deg = 1.0 + np.bincount(src, weights=ww, minlength=n)
    dinv = 1.0 / np.sqrt(deg)
    nbr_count = np.bincount(src, minlength=n)
    self_idx = np.arange(n)
    att_src = np.concatenate([src, self_idx])
    att_dst = np.concatenate([dst, self_idx])
    order = np.lexsort((att_dst, att_src))

    parts = {
        "n": n,
        "src": src,
        "dst": dst,
        "gcn": _csr_parts(np.concatenate([src, self_idx]), np.concatenate([dst, self_idx]),
                          np.concatenate([ww * dinv[src] * dinv[dst], 1.0 / deg]), n),
        "sage": _csr_parts(src, dst, ww / np.maximum(nbr_count[src], 1), n),
        "att_src": att_src[order],
        "att_dst": att_dst[order],
    }
    graph._cache["parts"] = parts
    return parts


def _block_csr(parts: list[dict], key: str, offsets: np.ndarray, n: int) -> sp.csr_matrix:
    indices = np.concatenate([p[key][0] + o for p, o in zip(parts, offsets)])
    data = np.concatenate([p[key][1] for p in parts])
    nnz = np.cumsum([0] + [p[key][2][-1] for p in parts])
    indptr = np.concatenate([[0]] + [p[key][2][1:] + z for p, z in zip(parts, nnz[:-1])])
    return sp.csr_matrix((data, indices.astype(np.int32), indptr.astype(np.int32)), shape=(n, n))


def segment_csr(seg: np.ndarray, n_rows: int) -> sp.csr_matrix:
    """Rows sum the entries whose (sorted) segment id matches."""
    m = seg.size
    indptr = np.concatenate([[0], np.cumsum(np.bincount(seg, minlength=n_rows))]).astype(np.int32)
    return sp.csr_matrix((np.ones(m), np.arange(m, dtype=np.int32), indptr), shape=(n_rows, m))


class GraphBatch:
    """Several lesion graphs laid out as one disconnected graph.

    Every per-graph operator becomes block diagonal, so a layer applied to the
    batch equals the layer applied to each graph separately.  Operators are
    built on first use.
    """

    def __init__(self, graphs: Sequence[LesionGraph]):
        if len(graphs) == 0:
            raise InputError("empty graph batch")
        self.graphs = list(graphs)
        self._parts = [_graph_parts(g) for g in self.graphs]
        sizes = np.array([p["n"] for p in self._parts], dtype=np.intp)
        self.n_graphs = len(self.graphs)
        self.n_nodes = int(sizes.sum())
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
        self.node_graph = np.repeat(np.arange(self.n_graphs), sizes)
        self.labels = np.array([g.label for g in self.graphs], dtype=np.float64)

    def _cat(self, key: str) -> np.ndarray:
        arrs = [p[key] + o for p, o in zip(self._parts, self.offsets)]
        return np.concatenate(arrs).astype(np.intp)

    @cached_property
    def features(self) -> np.ndarray:
        return np.concatenate([g.features for g in self.graphs], axis=0)

    @cached_property
    def src(self) -> np.ndarray:
        return self._cat("src")

    @cached_property
    def dst(self) -> np.ndarray:
        return self._cat("dst")

    @cached_property
    def adj_norm(self) -> sp.csr_matrix:
        return _block_csr(self._parts, "gcn", self.offsets, self.n_nodes)

    @cached_property
    def sage_mat(self) -> sp.csr_matrix:
        return _block_csr(self._parts, "sage", self.offsets, self.n_nodes)

    @cached_property
    def edge_scatter(self) -> sp.csr_matrix:
        return segment_csr(self.src, self.n_nodes)

    @cached_property
    def att_src(self) -> np.ndarray:
        return self._cat("att_src")

    @cached_property
    def att_dst(self) -> np.ndarray:
        return self._cat("att_dst")

    @cached_property
    def att_scatter(self) -> sp.csr_matrix:
        return segment_csr(self.att_src, self.n_nodes)

    @cached_property
    def att_starts(self) -> np.ndarray:
        a = self.att_src
        return np.flatnonzero(np.r_[True, a[1:] != a[:-1]])

    @cached_property
    def readout(self) -> sp.csr_matrix:
        return segment_csr(self.node_graph, self.n_graphs)

    def transposed(self, name: str) -> sp.csr_matrix:
        """Cached CSR transpose of one of the operators above."""
        key = "_T_" + name
        mt = self.__dict__.get(key)
        if mt is None:
            mt = self.__dict__[key] = getattr(self, name).T.tocsr()
        return mt

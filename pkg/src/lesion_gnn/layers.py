"""Neighbourhood aggregation layers: GCN, GraphSAGE, EdgeConv, GAT.

Each layer maps node features (n x d_in) to (n x d_out) and returns the
pre-activation output; the network decides where ReLU and dropout go.
``linear`` is the edge-free per-lesion map used by the Set-Proc baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError
from .graph import GraphBatch, LesionGraph, normalized_adjacency

LAYER_KINDS = ("gcn", "sage", "edge", "gat")
GAT_SLOPE = 0.2


@dataclass
class LayerParams:
    kind: str
    d_in: int
    d_out: int
    weights: dict[str, Tensor]

    def __getitem__(self, key: str) -> Tensor:
        return self.weights[key]


def glorot(d_in: int, d_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


def init_layer(kind: str, d_in: int, d_out: int, rng: np.random.Generator) -> LayerParams:
    if d_in < 1 or d_out < 1:
        raise ParameterError(f"layer dims must be positive, got {d_in} -> {d_out}")

    def p(arr):
        return Tensor(arr, requires_grad=True)

    zeros = lambda: p(np.zeros((1, d_out)))  # noqa: E731
    if kind in ("gcn", "linear"):
        w = {"W": p(glorot(d_in, d_out, rng)), "b": zeros()}
    elif kind == "sage":
        w = {"W_self": p(glorot(d_in, d_out, rng)), "W_neigh": p(glorot(d_in, d_out, rng)), "b": zeros()}
    elif kind == "edge":
        w = {"W": p(glorot(2 * d_in, d_out, rng)), "b": zeros()}
    elif kind == "gat":
        w = {
            "W_src": p(glorot(d_in, d_out, rng)),
            "W_dst": p(glorot(d_in, d_out, rng)),
            "a": p(glorot(d_out, 1, rng)),
            "b": zeros(),
        }
    else:
        raise ParameterError(f"unknown layer kind {kind!r}")
    return LayerParams(kind, d_in, d_out, w)


def _check_in(h: Tensor, params: LayerParams, n: int | None = None) -> None:
    if h.cols != params.d_in:
        raise ShapeError(f"{params.kind} layer expects {params.d_in} input features, got {h.shape}")
    if n is not None and h.rows != n:
        raise ShapeError(f"{params.kind} layer: {h.rows} feature rows for a graph with {n} nodes")


def _as_batch(graph) -> GraphBatch:
    return graph if isinstance(graph, GraphBatch) else GraphBatch([graph])


def gcn_forward(h: Tensor, adj_norm, params: LayerParams) -> Tensor:
    """A_hat H W + b, with A_hat the renormalised weighted adjacency."""
    adj_t = None
    if isinstance(adj_norm, LesionGraph):
        adj_norm = normalized_adjacency(adj_norm)
    elif isinstance(adj_norm, GraphBatch):
        adj_norm, adj_t = adj_norm.adj_norm, adj_norm.transposed("adj_norm")
    if isinstance(adj_norm, Tensor):
        adj_norm = adj_norm.data
    _check_in(h, params, adj_norm.shape[0])
    return ad.spmm(adj_norm, h @ params["W"], adj_t) + params["b"]


def sage_forward(h: Tensor, graph, params: LayerParams) -> Tensor:
    """W_self h_i + W_neigh mean_j(w_ij h_j) + b; isolated nodes get no neighbour term."""
    batch = _as_batch(graph)
    _check_in(h, params, batch.n_nodes)
    neigh = ad.spmm(batch.sage_mat, h, batch.transposed("sage_mat"))
    return h @ params["W_self"] + neigh @ params["W_neigh"] + params["b"]


def edge_forward(h: Tensor, graph, params: LayerParams) -> Tensor:
    """Sum over neighbours of ReLU([h_i, h_j - h_i] W + b)."""
    batch = _as_batch(graph)
    _check_in(h, params, batch.n_nodes)
    hi = ad.take_rows(h, batch.src)
    hj = ad.take_rows(h, batch.dst)
    msg = ad.relu(ad.concat([hi, hj - hi]) @ params["W"] + params["b"])
    return ad.spmm(batch.edge_scatter, msg, batch.transposed("edge_scatter"))


def gat_forward(h: Tensor, graph, params: LayerParams) -> Tensor:
    """Single-head attention over each node's neighbours plus itself.

    Scores are a^T LeakyReLU(W_src h_i + W_dst h_j), normalised with a softmax
    per receiving node i; stored edge weights are ignored.
    """
    batch = _as_batch(graph)
    _check_in(h, params, batch.n_nodes)
    g_src = h @ params["W_src"]
    g_dst = h @ params["W_dst"]
    pair = ad.take_rows(g_src, batch.att_src) + ad.take_rows(g_dst, batch.att_dst)
    logits = ad.leaky_relu(pair, GAT_SLOPE) @ params["a"]
    alpha = ad.segment_softmax(logits, batch.att_starts)
    msg = alpha * ad.take_rows(g_dst, batch.att_dst)
    return ad.spmm(batch.att_scatter, msg, batch.transposed("att_scatter")) + params["b"]


def gat_attention(h: Tensor, graph, params: LayerParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(receiver, sender, alpha) triples used by :func:`gat_forward`."""
    batch = _as_batch(graph)
    g_src = h.data @ params["W_src"].data
    g_dst = h.data @ params["W_dst"].data
    pair = Tensor(g_src[batch.att_src] + g_dst[batch.att_dst])
    logits = ad.leaky_relu(pair, GAT_SLOPE) @ params["a"].detach()
    alpha = ad.segment_softmax(logits, batch.att_starts)
    return batch.att_src, batch.att_dst, alpha.data[:, 0]


def linear_forward(h: Tensor, graph, params: LayerParams) -> Tensor:
    _check_in(h, params)
    return h @ params["W"] + params["b"]


def layer_forward(h: Tensor, batch: GraphBatch, params: LayerParams) -> Tensor:
    kind = params.kind
    if kind == "gcn":
        return gcn_forward(h, batch, params)
    if kind == "sage":
        return sage_forward(h, batch, params)
    if kind == "edge":
        return edge_forward(h, batch, params)
    if kind == "gat":
        return gat_forward(h, batch, params)
    if kind == "linear":
        return linear_forward(h, batch, params)
    raise ParameterError(f"unknown layer kind {kind!r}")

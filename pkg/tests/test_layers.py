import numpy as np
import pytest

from lesion_gnn.autodiff import Tensor, check_gradients
from lesion_gnn.errors import ParameterError, ShapeError
from lesion_gnn.graph import GraphBatch
from lesion_gnn.layers import (LAYER_KINDS, edge_forward, gat_attention, gat_forward, gcn_forward, init_layer,
                               layer_forward, sage_forward)

from conftest import random_graph


def neighbours(graph):
    nb = {i: {} for i in range(graph.n_nodes)}
    for i, j, w in graph.edges:
        nb[i][j] = w
        nb[j][i] = w
    return nb


def np_params(lp):
    return {k: v.data for k, v in lp.weights.items()}


def gcn_loop(graph, h, p):
    nb = neighbours(graph)
    deg = [1.0 + sum(nb[i].values()) for i in range(graph.n_nodes)]
    hw = h @ p["W"]
    out = np.zeros((graph.n_nodes, hw.shape[1]))
    for i in range(graph.n_nodes):
        out[i] += hw[i] / deg[i]
        for j, w in nb[i].items():
            out[i] += w / np.sqrt(deg[i] * deg[j]) * hw[j]
    return out + p["b"]


def sage_loop(graph, h, p):
    nb = neighbours(graph)
    out = h @ p["W_self"] + p["b"]
    for i in range(graph.n_nodes):
        if nb[i]:
            agg = sum(w * h[j] for j, w in nb[i].items()) / len(nb[i])
            out[i] += agg @ p["W_neigh"]
    return out


def edge_loop(graph, h, p):
    nb = neighbours(graph)
    out = np.zeros((graph.n_nodes, p["W"].shape[1]))
    for i in range(graph.n_nodes):
        for j in nb[i]:
            msg = np.concatenate([h[i], h[j] - h[i]]) @ p["W"] + p["b"][0]
            out[i] += np.maximum(msg, 0.0)
    return out


def gat_loop(graph, h, p):
    nb = neighbours(graph)
    gs, gd = h @ p["W_src"], h @ p["W_dst"]
    out = np.zeros((graph.n_nodes, gs.shape[1]))
    for i in range(graph.n_nodes):
        js = sorted(list(nb[i]) + [i])
        e = []
        for j in js:
            z = gs[i] + gd[j]
            e.append(float(np.where(z > 0, z, 0.2 * z) @ p["a"][:, 0]))
        e = np.exp(np.array(e) - max(e))
        alpha = e / e.sum()
        for a, j in zip(alpha, js):
            out[i] += a * gd[j]
    return out + p["b"]


ORACLES = {"gcn": (gcn_forward, gcn_loop), "sage": (sage_forward, sage_loop),
           "edge": (edge_forward, edge_loop), "gat": (gat_forward, gat_loop)}


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("k", [1, 3, 5])
def test_layer_matches_loop_oracle(kind, k, rng):
    fwd, oracle = ORACLES[kind]
    for _ in range(5):
        g = random_graph(rng, k=k, tau=0.4)
        lp = init_layer(kind, 8, 5, rng)
        for t in lp.weights.values():
            t.data = t.data + rng.normal(scale=0.1, size=t.shape)  # non-zero biases
        h = rng.normal(size=(g.n_nodes, 8))
        got = fwd(Tensor(h), g, lp).data
        np.testing.assert_allclose(got, oracle(g, h, np_params(lp)), rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_on_batch_equals_per_graph(kind, rng):
    graphs = [random_graph(rng, tau=0.4) for _ in range(5)]
    batch = GraphBatch(graphs)
    lp = init_layer(kind, 8, 4, rng)
    h = rng.normal(size=(batch.n_nodes, 8))
    out = layer_forward(Tensor(h), batch, lp).data
    for g, o in zip(graphs, batch.offsets):
        single = layer_forward(Tensor(h[o:o + g.n_nodes]), GraphBatch([g]), lp).data
        np.testing.assert_allclose(out[o:o + g.n_nodes], single, rtol=1e-12, atol=1e-14)


def test_gcn_accepts_dense_adjacency(rng):
    from lesion_gnn.graph import normalized_adjacency
    g = random_graph(rng, tau=0.4)
    lp = init_layer("gcn", 8, 3, rng)
    h = Tensor(rng.normal(size=(g.n_nodes, 8)))
    np.testing.assert_allclose(gcn_forward(h, normalized_adjacency(g), lp).data, gcn_forward(h, g, lp).data,
                               rtol=1e-12)


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_input_gradients(kind, rng):
    g = random_graph(rng, n=7, tau=0.4)
    lp = init_layer(kind, 8, 3, rng)
    w = Tensor(rng.normal(size=(g.n_nodes, 3)))
    from lesion_gnn import autodiff as ad
    gap = check_gradients(lambda t: ad.tsum(layer_forward(t, GraphBatch([g]), lp) * w),
                          rng.normal(size=(g.n_nodes, 8)))
    assert gap < 1e-6


def test_gat_attention_rows_sum_to_one(rng):
    g = random_graph(rng, tau=0.4)
    lp = init_layer("gat", 8, 4, rng)
    recv, send, alpha = gat_attention(Tensor(rng.normal(size=(g.n_nodes, 8))), g, lp)
    np.testing.assert_allclose(np.bincount(recv, weights=alpha), np.ones(g.n_nodes), rtol=1e-14)
    assert np.all(recv[send == recv] == np.arange(g.n_nodes))


def test_isolated_node_gets_self_terms_only(rng):
    g = random_graph(rng, n=1)
    h = rng.normal(size=(1, 8))
    lp = init_layer("sage", 8, 2, rng)
    np.testing.assert_allclose(sage_forward(Tensor(h), g, lp).data, h @ lp["W_self"].data)
    lp = init_layer("edge", 8, 2, rng)
    np.testing.assert_array_equal(edge_forward(Tensor(h), g, lp).data, np.zeros((1, 2)))


def test_layer_errors(rng):
    g = random_graph(rng, n=4)
    lp = init_layer("gcn", 8, 2, rng)
    with pytest.raises(ShapeError):
        gcn_forward(Tensor(np.zeros((4, 7))), g, lp)
    with pytest.raises(ShapeError):
        gcn_forward(Tensor(np.zeros((5, 8))), g, lp)
    with pytest.raises(ParameterError):
        init_layer("cheb", 8, 2, rng)
    with pytest.raises(ParameterError):
        init_layer("gcn", 0, 2, rng)


def test_gat_identical_neighbours_share_attention(rng):
    from lesion_gnn.graph import GraphConfig, Lesion, LesionGraph
    feat = rng.normal(size=8)
    lesions = [Lesion(pos, feat, "periventricular") for pos in ([0.5, 0.5, 0.5], [0.6, 0.5, 0.5], [0.4, 0.5, 0.5])]
    g = LesionGraph.build(lesions, 1, GraphConfig(k=2))
    lp = init_layer("gat", 8, 4, rng)
    recv, _, alpha = gat_attention(Tensor(g.features), g, lp)
    np.testing.assert_allclose(alpha[recv == 0], [1 / 3] * 3, rtol=1e-14)


def test_gat_ignores_edge_weights_gcn_does_not(rng):
    import dataclasses
    g = random_graph(rng, n=10, tau=0.4)
    doubled = dataclasses.replace(g, edges=[(i, j, 2 * w) for i, j, w in g.edges], _cache={})
    h = Tensor(rng.normal(size=(g.n_nodes, 8)))
    gat = init_layer("gat", 8, 4, rng)
    np.testing.assert_array_equal(gat_forward(h, g, gat).data, gat_forward(h, doubled, gat).data)
    gcn = init_layer("gcn", 8, 4, rng)
    assert not np.allclose(gcn_forward(h, g, gcn).data, gcn_forward(h, doubled, gcn).data)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import dense_gcn, dense_norm_adjacency, finite_difference, max_relative_error
from stageids.bundle import dumps
from stageids.errors import DegenerateLabels, DimensionMismatch, EmptyMask, IndexOutOfRange
from stageids.gcn import (GcnConfig, GcnModel, cross_entropy_loss, extract_embeddings, gcn_forward,
                          gcn_layer_forward, loss_and_grads, train_gcn)
from stageids.graph import graph_from_edges


def random_graph(rng, n, f, p=0.3, self_loops=True):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return graph_from_edges(rng.normal(size=(n, f)), edges, self_loops), edges


def two_clusters(rng, n=40):
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, 3)) * 0.3
    x[:, 0] += np.where(y == 1, 2.0, -2.0)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if y[i] == y[j] and rng.random() < 0.15]
    return graph_from_edges(x, edges), y


def test_layer_identity_single_node():
    g = graph_from_edges(np.array([[1.0, 2.0]]), [])
    assert gcn_layer_forward(g, g.node_features, np.eye(2), True).tolist() == [[1.0, 2.0]]


def test_layer_isolated_node_without_self_loop_is_zero():
    g = graph_from_edges(np.array([[1.0, 2.0]]), [], self_loops=False)
    out = gcn_layer_forward(g, g.node_features, np.array([[3.0, -1.0], [0.5, 2.0]]), False)
    assert out.tolist() == [[0.0, 0.0]]


def test_layer_two_node_path_swaps_rows():
    g = graph_from_edges(np.eye(2), [(0, 1)], self_loops=False)
    assert gcn_layer_forward(g, np.eye(2), np.eye(2), True).tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_layer_dimension_mismatch():
    g = graph_from_edges(np.eye(2), [(0, 1)])
    with pytest.raises(DimensionMismatch):
        gcn_layer_forward(g, np.eye(2), np.eye(3), True)


def test_model_dims_must_chain():
    with pytest.raises(DimensionMismatch):
        GcnModel([np.zeros((3, 4)), np.zeros((5, 4))], np.zeros((4, 2)), np.zeros(2))
    m = GcnModel.init(3, 4, 2)
    with pytest.raises(DimensionMismatch):
        gcn_forward(m, graph_from_edges(np.zeros((2, 5)), []))


def test_zero_head_gives_half():
    m = GcnModel.init(3, 4, 2, seed=1)
    m.head_weights[:] = 0.0
    g = graph_from_edges(np.random.default_rng(0).normal(size=(5, 3)), [(0, 1), (2, 3)])
    probs, _ = gcn_forward(m, g)
    assert np.all(probs == 0.5)


def test_zero_features_give_half():
    m = GcnModel.init(3, 4, 2, seed=1)
    probs, _ = gcn_forward(m, graph_from_edges(np.zeros((4, 3)), [(0, 1)]))
    assert np.all(probs == 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_dense_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 51))
    loops = bool(seed % 2 == 0)
    g, edges = random_graph(rng, n, 4, p=0.2, self_loops=loops)
    m = GcnModel.init(4, 6, 2 + seed % 2, seed=seed)
    m.head_bias[:] = rng.normal(size=2)
    probs, emb = gcn_forward(m, g)
    ref_p, ref_h = dense_gcn(dense_norm_adjacency(n, edges, loops), g.node_features, m.layer_weights,
                             m.head_weights, m.head_bias)
    assert np.max(np.abs(emb - ref_h)) < 1e-10
    assert np.max(np.abs(probs - ref_p)) < 1e-10
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_cross_entropy_examples():
    assert math.isclose(cross_entropy_loss(np.array([[0.5, 0.5]]), [0]), math.log(2), rel_tol=1e-12)
    assert cross_entropy_loss(np.array([[1.0, 0.0]]), [0]) == pytest.approx(0.0, abs=1e-12)
    both = cross_entropy_loss(np.array([[0.5, 0.5], [1.0, 0.0]]), [0, 0], [True, True])
    assert both == pytest.approx(0.346574, abs=1e-6)
    assert math.isfinite(cross_entropy_loss(np.array([[1.0, 0.0]]), [1]))
    with pytest.raises(EmptyMask):
        cross_entropy_loss(np.array([[0.5, 0.5]]), [0], [False])


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    g, _ = random_graph(rng, 6, 4, p=0.4)
    m = GcnModel.init(4, 4, 2, seed=seed)
    m.head_bias[:] = rng.normal(size=2) * 0.1
    y = rng.integers(0, 2, size=6)
    mask = rng.random(6) < 0.8
    mask[0] = True
    _, grads = loss_and_grads(m, g, y, mask)
    numeric = finite_difference(lambda: loss_and_grads(m, g, y, mask)[0], m.params)
    assert max_relative_error(grads, numeric) < 1e-4


@given(st.integers(2, 25), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    g, edges = random_graph(rng, n, 3)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    h = graph_from_edges(g.node_features[perm], [(int(inv[i]), int(inv[j])) for i, j in edges])
    m = GcnModel.init(3, 5, 2, seed=seed % 1000)
    p1, e1 = gcn_forward(m, g)
    p2, e2 = gcn_forward(m, h)
    assert np.array_equal(p2, p1[perm])
    assert np.array_equal(e2, e1[perm])


def test_training_separable_clusters():
    rng = np.random.default_rng(7)
    g, y = two_clusters(rng)
    model, losses = train_gcn(g, y, config=GcnConfig(hidden_dim=8, epochs=200, seed=3))
    assert losses[-1] < 0.1
    for k in range(len(losses) - 10):
        span = losses[k:k + 11]
        for a, b in zip(span, span[1:]):
            assert b <= a * 1.05
        assert span[-1] <= span[0]


def test_training_is_deterministic():
    rng = np.random.default_rng(8)
    g, y = two_clusters(rng)
    cfg = GcnConfig(hidden_dim=8, epochs=30, seed=5)
    m1, l1 = train_gcn(g, y, config=cfg)
    m2, l2 = train_gcn(g, y, config=cfg)
    assert l1 == l2
    assert dumps("gcn", m1.to_dict()) == dumps("gcn", m2.to_dict())


def test_training_needs_both_classes():
    g = graph_from_edges(np.zeros((3, 2)), [(0, 1)])
    with pytest.raises(DegenerateLabels):
        train_gcn(g, [1, 1, 1])
    with pytest.raises(DegenerateLabels):
        train_gcn(g, [0, 1, 1], train_mask=[False, True, True])


def test_extract_embeddings():
    rng = np.random.default_rng(3)
    g, _ = random_graph(rng, 7, 3)
    m = GcnModel.init(3, 5, 2, seed=2)
    _, emb = gcn_forward(m, g)
    got = extract_embeddings(m, g, range(7))
    assert len(got) == 7 and all(e.vector.shape == (5,) for e in got)
    picked = extract_embeddings(m, g, [4, 1])
    assert [e.node_index for e in picked] == [4, 1]
    assert np.array_equal(picked[0].vector, emb[4])
    assert extract_embeddings(m, g, []) == []
    with pytest.raises(IndexOutOfRange):
        extract_embeddings(m, g, [7])


def test_serialization_round_trip_is_exact():
    rng = np.random.default_rng(4)
    g, _ = random_graph(rng, 9, 3)
    m = GcnModel.init(3, 5, 3, seed=11)
    again = GcnModel.from_dict(m.to_dict())
    assert np.array_equal(gcn_forward(m, g)[0], gcn_forward(again, g)[0])

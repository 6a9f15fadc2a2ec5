import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odohmm.geometry import (embed_along_tree, max_weight_spanning_forest,
                             relation_means_from_embedding, transform_relative, tree_components)
from odohmm.model import CoordinateRegime, rotate


def test_transform_relative_quarter_turn():
    x, y = transform_relative((1.0, 0.0), np.pi / 2)
    assert x == pytest.approx(0.0, abs=1e-15)
    assert y == pytest.approx(1.0)


def test_spanning_forest_against_networkx():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        w = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
        w = w + w.T
        np.fill_diagonal(w, 0.0)
        edges = max_weight_spanning_forest(w)
        g = nx.Graph()
        g.add_nodes_from(range(n))
        for i in range(n):
            for j in range(i + 1, n):
                if w[i, j] > 0:
                    g.add_edge(i, j, weight=w[i, j])
        ref = nx.maximum_spanning_tree(g)
        assert sum(w[a, b] for a, b in edges) == pytest.approx(
            sum(d["weight"] for *_, d in ref.edges(data=True)))
        assert len(edges) == ref.number_of_edges()


def test_tree_components_labels():
    label, orders = tree_components(5, [(0, 2), (3, 4)])
    assert list(label) == [0, 1, 0, 2, 2]
    assert orders[0] == [(0, 2)]
    assert orders[2] == [(3, 4)]


@pytest.mark.parametrize("regime", [CoordinateRegime.GLOBAL, CoordinateRegime.RELATIVE])
def test_embedding_round_trip(regime):
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(5, 2)) * 4
    theta = rng.uniform(-3, 3, size=5)
    pos -= pos[0]
    theta -= theta[0]
    mu = relation_means_from_embedding(pos, theta, regime)
    edges = [(0, 1), (1, 2), (1, 3), (3, 4)]
    p2, t2 = embed_along_tree(mu, edges, regime)
    np.testing.assert_allclose(p2, pos, atol=1e-12)
    np.testing.assert_allclose(np.angle(np.exp(1j * (t2 - theta))), 0.0, atol=1e-12)


@settings(max_examples=50)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_relative_means_satisfy_transformed_constraints(n, seed):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(n, 2)) * 3
    theta = rng.uniform(-np.pi, np.pi, size=n)
    mu = relation_means_from_embedding(pos, theta, CoordinateRegime.RELATIVE)
    for a in range(n):
        for b in range(n):
            # mu(a, b) = -T_ba[mu(b, a)]
            np.testing.assert_allclose(mu[a, b, :2], -rotate(mu[b, a, :2], mu[b, a, 2]),
                                       atol=1e-9)
            for c in range(n):
                np.testing.assert_allclose(
                    mu[a, c, :2], mu[a, b, :2] + rotate(mu[b, c, :2], mu[b, a, 2]), atol=1e-9)

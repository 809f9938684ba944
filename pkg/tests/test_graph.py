import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dagm.graph import (
    Graph,
    GraphError,
    MixingError,
    MixingWarning,
    complete_graph,
    max_degree_weights,
    metropolis_weights,
    path_graph,
    random_connected_graph,
    read_edge_list,
    spectral_gap,
    star_graph,
    uniform_weights,
    validate_mixing,
    write_edge_list,
    write_mixing_csv,
)


def bfs_connected(n, edges):
    # independent traversal over an adjacency matrix
    adj = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        adj[i, j] = adj[j, i] = True
    reach = np.zeros(n, dtype=bool)
    reach[0] = True
    for _ in range(n):
        reach = reach | adj[reach].any(axis=0)
    return bool(reach.all())


class TestGraph:
    def test_rejects_self_loop(self):
        with pytest.raises(GraphError):
            Graph(3, frozenset({(1, 1)}))

    def test_rejects_duplicates(self):
        with pytest.raises(GraphError):
            Graph.from_edges(3, [(0, 1), (1, 0)])

    def test_rejects_out_of_range(self):
        with pytest.raises(GraphError):
            Graph(2, frozenset({(0, 2)}))

    def test_normalizes_edge_order(self):
        assert Graph(3, frozenset({(2, 1)})).edges == frozenset({(1, 2)})

    def test_disconnected_flag(self):
        assert not Graph(3, frozenset({(0, 1)})).connected
        assert path_graph(4).connected


class TestRandomGraph:
    def test_single_node(self):
        g = random_connected_graph(1, 0.5, 0)
        assert g.n == 1 and len(g.edges) == 0

    def test_two_nodes(self):
        assert random_connected_graph(2, 1.0, 0).edges == frozenset({(0, 1)})

    def test_hundred_nodes(self):
        g = random_connected_graph(100, 0.5, 7)
        assert bfs_connected(g.n, g.edges)
        assert 99 <= len(g.edges) <= 4950

    def test_deterministic(self):
        assert random_connected_graph(20, 0.3, 5) == random_connected_graph(20, 0.3, 5)
        assert random_connected_graph(20, 0.3, 5) != random_connected_graph(20, 0.3, 6)

    @pytest.mark.parametrize("r", [0.0, -0.1, 1.5])
    def test_invalid_ratio(self, r):
        with pytest.raises(GraphError):
            random_connected_graph(5, r, 0)

    def test_full_ratio_is_complete(self):
        assert random_connected_graph(6, 1.0, 3) == complete_graph(6)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 40), st.sampled_from([0.05, 0.3, 0.5, 0.8]), st.integers(0, 10_000))
    def test_always_connected(self, n, r, seed):
        g = random_connected_graph(n, r, seed)
        assert bfs_connected(g.n, g.edges)


class TestMetropolis:
    def test_path3(self, path3):
        W = metropolis_weights(path3)
        expected = np.array([[2, 1, 0], [1, 1, 1], [0, 1, 2]]) / 3.0
        np.testing.assert_allclose(W.w, expected, atol=1e-15)
        assert W.theta == pytest.approx(1 / 3) and W.Theta == pytest.approx(2 / 3)

    def test_single_node_warns(self):
        with pytest.warns(MixingWarning):
            W = metropolis_weights(Graph(1))
        assert W.w.tolist() == [[1.0]]

    def test_two_nodes(self):
        W = metropolis_weights(path_graph(2))
        np.testing.assert_array_equal(W.w, np.full((2, 2), 0.5))

    def test_disconnected_rejected(self):
        with pytest.raises(MixingError):
            metropolis_weights(Graph(3, frozenset({(0, 1)})))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 30), st.sampled_from([0.2, 0.5, 0.8]), st.integers(0, 10_000))
    def test_assumptions_hold(self, n, r, seed):
        g = random_connected_graph(n, r, seed)
        W = metropolis_weights(g)
        rep = validate_mixing(W, g)
        if g.degrees.min() < n - 1:
            assert rep.ok, str(rep)
        np.testing.assert_array_equal(W.w, W.w.T)
        assert spectral_gap(W) < 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 15), st.integers(0, 10_000))
    def test_relabel_equivariance(self, n, seed):
        g = random_connected_graph(n, 0.4, seed)
        perm = np.random.default_rng(seed).permutation(n)
        W = metropolis_weights(g).w
        Wp = metropolis_weights(g.relabel(perm)).w
        P = np.eye(n)[perm]  # P[i, perm[i]] = 1
        np.testing.assert_allclose(P.T @ W @ P, Wp, atol=1e-15)


class TestMaxDegree:
    def test_path3(self, path3):
        W = max_degree_weights(path3)
        np.testing.assert_allclose(np.diag(W.w), [2 / 3, 1 / 3, 2 / 3])
        assert W.w[0, 1] == W.w[1, 2] == pytest.approx(1 / 3)
        assert W.w[0, 2] == 0.0

    def test_complete4(self):
        W = max_degree_weights(complete_graph(4))
        np.testing.assert_allclose(W.w, np.full((4, 4), 0.25))

    def test_star4(self):
        W = max_degree_weights(star_graph(4))
        np.testing.assert_allclose(np.diag(W.w), [0.25, 0.75, 0.75, 0.75])

    @pytest.mark.parametrize("n", [1, 2])
    def test_small_rejected(self, n):
        with pytest.raises(MixingError, match="n > 2"):
            max_degree_weights(path_graph(n))


class TestSpectralGap:
    def test_uniform_is_zero(self):
        assert spectral_gap(uniform_weights(5)) == pytest.approx(0.0, abs=1e-14)

    def test_path3(self, path3_W):
        # eigenvalues of W are {0, 2/3, 1}
        assert spectral_gap(path3_W) == pytest.approx(2 / 3, abs=1e-14)

    def test_single_node(self):
        assert spectral_gap(np.array([[1.0]])) == 0.0


class TestValidate:
    def test_identity_fails_null_space(self, path3):
        rep = validate_mixing(np.eye(3), path3)
        assert "A3_null_space" in rep.failed()

    def test_negative_entry(self, path3):
        w = np.array([[1.2, -0.2, 0.0], [-0.2, 0.4, 0.8], [0.0, 0.8, 0.2]])
        rep = validate_mixing(w, path3)
        assert "nonnegative" in rep.failed()

    def test_sparsity_violation(self, path3):
        rep = validate_mixing(np.full((3, 3), 1 / 3), path3)
        assert rep.failed() == ["A1_sparsity"]

    def test_never_raises(self, path3):
        rep = validate_mixing(np.full((2, 2), np.nan), path3)
        assert not rep.ok

    def test_report_text(self, path3, path3_W):
        text = str(validate_mixing(path3_W, path3))
        assert "PASS  A2_doubly_stochastic" in text


def test_edge_list_roundtrip(tmp_path):
    g = random_connected_graph(12, 0.3, 1)
    write_edge_list(g, tmp_path / "g.txt")
    assert read_edge_list(tmp_path / "g.txt") == g


def test_edge_list_comments(tmp_path):
    (tmp_path / "g.txt").write_text("# path\n3\n0 1  # first\n1 2\n")
    assert read_edge_list(tmp_path / "g.txt") == path_graph(3)


def test_mixing_csv(tmp_path, path3_W):
    write_mixing_csv(path3_W, tmp_path / "w.csv")
    back = np.loadtxt(tmp_path / "w.csv", delimiter=",")
    np.testing.assert_array_equal(back, path3_W.w)

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from damgt.errors import ConfigError, DimensionMismatchError, NodeIndexError, ParseError, UndefinedMetricError
from damgt.graph import Graph, edge_homophily, normalized_adjacency, random_split
from damgt.io import load_graph, read_features, save_graph, write_features

from conftest import dense_ahat, random_graph


def _write(tmp_path, edges_text, X, labels):
    e = tmp_path / "edges.txt"
    e.write_text(edges_text)
    f = tmp_path / "features.dmat"
    write_features(f, np.asarray(X, dtype=float))
    lab = tmp_path / "labels.txt"
    lab.write_text("".join(f"{y}\n" for y in labels))
    return e, f, lab


def test_load_minimal_graph(tmp_path):
    g = load_graph(*_write(tmp_path, "0 1\n", np.eye(2), [0, 1]))
    assert (g.n, len(g.indices), g.d, g.c) == (2, 2, 2, 2)


def test_load_edgeless(tmp_path):
    g = load_graph(*_write(tmp_path, "", np.ones((3, 2)), [0, 0, 1]))
    assert g.n == 3 and g.num_edges == 0


def test_load_out_of_range_node(tmp_path):
    with pytest.raises(NodeIndexError):
        load_graph(*_write(tmp_path, "0 5\n", np.ones((3, 2)), [0, 0, 1]))


def test_load_parse_error_has_line_number(tmp_path):
    with pytest.raises(ParseError) as exc:
        load_graph(*_write(tmp_path, "0 1\n1 x\n", np.ones((3, 2)), [0, 0, 1]))
    assert exc.value.line_no == 2 and ":2:" in str(exc.value)


def test_load_dimension_mismatch(tmp_path):
    with pytest.raises(DimensionMismatchError):
        load_graph(*_write(tmp_path, "0 1\n", np.ones((3, 2)), [0, 1]))


def test_self_loops_dropped_with_warning_and_duplicates_counted(tmp_path):
    paths = _write(tmp_path, "0 0\n0 1\n1 0\n1 2\n", np.ones((3, 2)), [0, 0, 1])
    with pytest.warns(UserWarning, match="self-loop"):
        g = load_graph(*paths)
    assert g.num_edges == 2
    assert g.report.self_loops_dropped == 1 and g.report.duplicate_edges == 1
    assert not np.any(np.repeat(np.arange(g.n), g.degrees) == g.indices)


def test_csv_features(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("1,2\n3,4.5\n")
    assert np.array_equal(read_features(p), [[1, 2], [3, 4.5]])


def test_round_trip(tmp_path, rng):
    g = random_graph(rng, 12, 0.3, d=4, c=3)
    paths = (tmp_path / "e.txt", tmp_path / "f.dmat", tmp_path / "l.txt")
    save_graph(g, *paths)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        h = load_graph(*paths)
    assert h == g and h.content_hash() == g.content_hash()


def test_csr_invariants(rng):
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(1, 25)), 0.4)
        A = g.adjacency().toarray()
        assert np.array_equal(A, A.T) and np.all(np.diag(A) == 0)
        for i in range(g.n):
            row = g.indices[g.indptr[i]:g.indptr[i + 1]]
            assert np.all(np.diff(row) > 0) and np.all((row >= 0) & (row < g.n))


def test_labels_beyond_c_rejected():
    with pytest.raises(ConfigError):
        Graph.from_edges([], np.ones((2, 1)), [0, 3], c=2)


def test_normalized_adjacency_single_edge():
    g = Graph.from_edges([(0, 1)], np.eye(2), [0, 1])
    assert np.array_equal(normalized_adjacency(g).toarray(), np.full((2, 2), 0.5))


def test_normalized_adjacency_isolated():
    g = Graph.from_edges([], np.ones((1, 1)), [0])
    assert normalized_adjacency(g).toarray().tolist() == [[1.0]]


def test_normalized_adjacency_path_matches_dense():
    g = Graph.from_edges([(0, 1), (1, 2)], np.eye(3), [0, 1, 0])
    assert np.abs(normalized_adjacency(g).toarray() - dense_ahat(g)).max() < 1e-15


def test_normalized_adjacency_properties(rng):
    for _ in range(30):
        g = random_graph(rng, int(rng.integers(1, 50)), rng.uniform(0, 0.5))
        adj = normalized_adjacency(g)
        M = adj.toarray()
        assert np.array_equal(M, M.T)
        assert np.all(np.diag(M) > 0)
        nz = M[M != 0]
        assert np.all((nz > 0) & (nz <= 1))
        ev = np.linalg.eigvalsh(M)
        assert ev.max() == pytest.approx(1.0, abs=1e-12) and ev.min() > -1.0
        assert np.all(M.sum(axis=1) > 0)
        x = rng.standard_normal(g.n)
        assert np.abs(adj.matvec(x) - dense_ahat(g) @ x).max() < 1e-14


def test_row_sums_can_exceed_one():
    # symmetric normalisation is not row-substochastic: a star centre row sums above 1
    k = 5
    g = Graph.from_edges([(0, i) for i in range(1, k + 1)], np.ones((k + 1, 1)), [0] * (k + 1))
    rows = normalized_adjacency(g).toarray().sum(axis=1)
    assert rows[0] == pytest.approx(1 / (k + 1) + k / np.sqrt(2 * (k + 1)))
    assert rows[0] > 1 and np.all(rows[1:] < 1)


def test_homophily_examples():
    tri = Graph.from_edges([(0, 1), (1, 2), (0, 2)], np.ones((3, 1)), [1, 1, 1])
    assert edge_homophily(tri) == 1.0
    assert edge_homophily(Graph.from_edges([(0, 1)], np.ones((2, 1)), [0, 1])) == 0.0
    cyc = Graph.from_edges([(0, 1), (1, 2), (2, 3), (3, 0)], np.ones((4, 1)), [0, 0, 1, 1])
    assert edge_homophily(cyc) == 0.5
    with pytest.raises(UndefinedMetricError):
        edge_homophily(Graph.from_edges([], np.ones((2, 1)), [0, 1]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(4)))
def test_homophily_permutation_invariant(seed, perm):
    g = random_graph(np.random.default_rng(seed), 15, 0.3, c=4)
    if g.num_edges == 0:
        return
    h = Graph.from_edges(g.edge_list(), g.X, np.asarray(perm)[g.Y], c=4)
    assert edge_homophily(h) == edge_homophily(g)


def test_split_examples():
    a = random_split(10, (0.6, 0.2, 0.2), seed=1)
    assert a.sizes() == (6, 2, 2) and a == random_split(10, (0.6, 0.2, 0.2), seed=1)
    assert random_split(7, (0.6, 0.2, 0.2), seed=0).sizes() == (5, 1, 1)
    with pytest.raises(ConfigError):
        random_split(10, (0.5, 0.2, 0.2))
    with pytest.raises(ConfigError):
        random_split(10, (1.0, 0.0, 0.0))


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 500), st.floats(0.05, 0.9), st.floats(0.05, 0.9), st.integers(0, 1000))
def test_split_partition(n, a, b, seed):
    if a + b >= 0.95:
        return
    fr = (1 - a - b, a, b)
    s = random_split(n, fr, seed)
    allnodes = np.concatenate([s.train, s.val, s.test])
    assert np.array_equal(np.sort(allnodes), np.arange(n))
    for size, f in zip(s.sizes()[1:], fr[1:]):
        assert abs(size - f * n) <= 1
    assert abs(s.sizes()[0] - fr[0] * n) <= 2  # remainder of both floors lands in train

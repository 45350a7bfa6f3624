import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leanpn import geometry as G
from leanpn.tensor_core import InvalidInputError, make_rng


def line(*xs):
    return np.array([[x, 0.0, 0.0] for x in xs])


# ------------------------------------------------------------------ fps


def test_fps_single_point():
    assert G.fps(line(0), 1).tolist() == [0]


def test_fps_line_example():
    assert G.fps(line(0, 1, 2, 10), 2, start=0).tolist() == [0, 3]


def test_fps_exhaustion_is_permutation():
    pos = make_rng(0).normal(size=(9, 3))
    assert sorted(G.fps(pos, 9).tolist()) == list(range(9))


def test_fps_rejects_m_above_n():
    with pytest.raises(InvalidInputError):
        G.fps(line(0, 1), 3)


def test_fps_coincident_points_not_repicked():
    pos = np.zeros((4, 3))
    assert sorted(G.fps(pos, 4).tolist()) == [0, 1, 2, 3]


def brute_fps(pos, m, start):
    picks = [start]
    for _ in range(1, m):
        best, arg = -1.0, None
        for j in range(len(pos)):
            if j in picks:
                continue
            d = min(np.sum((pos[j] - pos[p]) ** 2) for p in picks)
            if d > best:
                best, arg = d, j
        picks.append(arg)
    return picks


def min_pair(pos, ids):
    return min(np.linalg.norm(pos[a] - pos[b]) for a, b in itertools.combinations(ids, 2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 12))
def test_fps_matches_brute_force_and_last_pick_is_optimal(seed, n):
    rng = make_rng(seed)
    pos = rng.normal(size=(n, 3))
    m = int(rng.integers(2, n + 1))
    picks = G.fps(pos, m).tolist()
    assert picks == brute_fps(pos, m, 0)
    got = min_pair(pos, picks)
    for j in set(range(n)) - set(picks):
        assert got >= min_pair(pos, picks[:-1] + [j]) - 1e-12


# ----------------------------------------------------------- ball query


def test_ball_query_isolated_point():
    pos = line(0, 100)
    nbr = G.ball_query(pos[:1], pos, [0], 1.0, 3)
    assert nbr.indices.tolist() == [[0, 0, 0, 0]]
    assert nbr.valid.tolist() == [1]


def test_ball_query_line_example():
    pos = line(0, 1, 2)
    nbr = G.ball_query(pos[1:2], pos, [1], 1.5, 2)
    assert nbr.indices.tolist() == [[1, 0, 2]]
    assert nbr.valid.tolist() == [3]


def test_ball_query_full_ball_ascending():
    pos = make_rng(2).normal(size=(7, 3))
    nbr = G.ball_query(pos, pos, np.arange(7), np.inf, 6)
    for i, row in enumerate(nbr.indices.tolist()):
        assert row[0] == i
        assert row[1:] == [j for j in range(7) if j != i]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 2.0), st.integers(1, 8))
def test_ball_query_matches_brute_force(seed, r, k):
    rng = make_rng(seed)
    pos = rng.uniform(-1, 1, (20, 3))
    ids = rng.choice(20, 6, replace=False)
    nbr = G.ball_query(pos[ids], pos, ids, r, k)
    for row, c, v in zip(nbr.indices, ids, nbr.valid):
        inside = [j for j in range(20) if j != c and np.sum((pos[j] - pos[c]) ** 2) <= r * r][:k]
        assert row.tolist() == [c] + inside + [c] * (k - len(inside))
        assert v == len(inside) + 1
        for j in inside:
            assert np.linalg.norm(pos[j] - pos[c]) <= r + 1e-12


# ------------------------------------------------------------------ knn


def test_knn_coincident_first():
    idx, d = G.knn(line(1), line(0, 1, 2), 2)
    assert idx[0, 0] == 1 and d[0, 0] == 0.0


def test_knn_line_example():
    idx, _ = G.knn(line(0.9), line(0, 1, 2, 10), 2)
    assert idx.tolist() == [[1, 0]]


def test_knn_exhaustion_sorted():
    src = make_rng(4).normal(size=(6, 3))
    q = make_rng(5).normal(size=(2, 3))
    idx, d = G.knn(q, src, 6)
    for row, dr, qq in zip(idx, d, q):
        assert sorted(row.tolist()) == list(range(6))
        assert np.all(np.diff(dr) >= 0)
        assert np.allclose(dr, np.sum((src[row] - qq) ** 2, axis=1))


def test_knn_ties_lowest_index():
    idx, _ = G.knn(line(1), line(0, 2, 1.5, 0.5), 4)
    assert idx.tolist() == [[2, 3, 0, 1]]


def test_knn_rejects_k_above_n():
    with pytest.raises(InvalidInputError):
        G.knn(line(0), line(0, 1), 3)


# ---------------------------------------------------------- gather/scatter


def test_index_lookup_k0_is_singleton_axis():
    x = make_rng(0).normal(size=(4, 2))
    nbr = G.NeighborIndex(np.arange(4)[:, None], np.ones(4, int), 0)
    assert np.array_equal(G.index_lookup(x, nbr), x[:, :, None])


def test_index_lookup_hand_example():
    nbr = G.NeighborIndex(np.array([[0, 1], [1, 0]]), np.array([2, 2]), 1)
    out = G.index_lookup(np.array([[1.0], [2.0]]), nbr)
    assert out.tolist() == [[[1.0, 2.0]], [[2.0, 1.0]]]


def test_index_lookup_padding_replicates_center():
    pos = line(0, 50, 100)
    nbr = G.ball_query(pos, pos, np.arange(3), 1.0, 3)
    x = make_rng(1).normal(size=(3, 4))
    out = G.index_lookup(x, nbr)
    for j in range(4):
        assert np.array_equal(out[:, :, j], x)


def test_index_lookup_out_of_range_names_row():
    nbr = G.NeighborIndex(np.array([[0, 1], [1, 5]]), np.array([2, 2]), 1)
    with pytest.raises(IndexError, match="row 1"):
        G.index_lookup(np.zeros((2, 1)), nbr)


def test_inverse_lookup_routes_one_hot():
    nbr = G.NeighborIndex(np.array([[0, 2], [1, 0], [2, 1]]), np.full(3, 2), 1)
    g = np.zeros((3, 1, 2))
    g[1, 0, 0] = 1.0
    out = G.inverse_index_lookup(g, nbr, 3)
    assert out[:, 0].tolist() == [0.0, 1.0, 0.0]


def test_inverse_lookup_adjoint_identity():
    rng = make_rng(6)
    pos = rng.normal(size=(15, 3))
    nbr = G.knn_index(pos, 4)
    x = rng.normal(size=(15, 5))
    g = rng.normal(size=(15, 5, 5))
    lhs = np.sum(G.index_lookup(x, nbr) * g)
    rhs = np.sum(x * G.inverse_index_lookup(g, nbr, 15))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_inverse_lookup_all_ones_counts_multiplicity():
    rng = make_rng(7)
    pos = rng.normal(size=(10, 3))
    nbr = G.ball_query(pos, pos, np.arange(10), 0.8, 3)
    out = G.inverse_index_lookup(np.ones((10, 2, 4)), nbr, 10)
    counts = np.bincount(nbr.indices.ravel(), minlength=10)
    assert np.array_equal(out[:, 0], counts) and np.array_equal(out[:, 1], counts)


# ------------------------------------------------------------ interpolation


def test_interp_coincident_source():
    w = G.interp_weights(line(1), line(0, 1, 2))
    assert w.indices[0, 0] == 1 and w.weights[0].tolist() == [1.0, 0.0, 0.0]


def test_interp_equidistant_pair():
    w = G.interp_weights(line(0.5), line(0, 1, 5.5))
    assert abs(w.weights[0, 0] - w.weights[0, 1]) <= 1e-9


def test_interp_hand_weights():
    # inverse squares 4, 4, 1/2.25 normalised
    w = G.interp_weights(line(0.5), line(0, 1, 2))
    assert np.allclose(w.weights[0], [0.4737, 0.4737, 0.0526], atol=1e-3)


def test_interp_needs_three_sources():
    with pytest.raises(InvalidInputError):
        G.interp_weights(line(0), line(0, 1))


def test_interp_weights_properties_and_source_permutation():
    rng = make_rng(8)
    src, q = rng.normal(size=(12, 3)), rng.normal(size=(7, 3))
    w = G.interp_weights(q, src)
    assert np.all(w.weights >= 0)
    assert np.allclose(w.weights.sum(axis=1), 1.0, atol=1e-12)
    perm = rng.permutation(12)
    wp = G.interp_weights(q, src[perm])
    assert np.array_equal(perm[wp.indices], w.indices)
    assert np.allclose(wp.weights, w.weights, atol=1e-15)


def test_interpolate_copy_and_constant_field():
    src, q = make_rng(9).normal(size=(6, 3)), make_rng(10).normal(size=(4, 3))
    w = G.interp_weights(q, src)
    assert np.allclose(G.interpolate(np.full((6, 2), 3.5), w), 3.5, atol=1e-12)
    one = G.InterpWeights(np.array([[4, 0, 0]]), np.array([[1.0, 0.0, 0.0]]))
    f = make_rng(11).normal(size=(6, 2))
    assert np.array_equal(G.interpolate(f, one)[0], f[4])


def test_interpolate_adjoint_identity():
    rng = make_rng(12)
    src, q = rng.normal(size=(9, 3)), rng.normal(size=(14, 3))
    w = G.interp_weights(q, src)
    x, g = rng.normal(size=(9, 3)), rng.normal(size=(14, 3))
    lhs = np.sum(G.interpolate(x, w) * g)
    rhs = np.sum(x * G.interpolate_adjoint(g, w, 9))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

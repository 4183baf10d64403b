import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defskill.court import DEFAULT_COURT, Possession
from defskill.matchup import MatchupPosterior
from defskill.similarity import (CARPriorError, DefenderTypeClustering, OffenderGraph,
                                 build_offender_graph, car_precision_check,
                                 defender_time_in_basis, knn_union_adjacency, lloyd_kmeans,
                                 pca_kmeans_groups)


def three_blobs(rng, n=20):
    centers = np.array([[0.6, 0.2, 0.1, 0.05, 0.05], [0.1, 0.6, 0.2, 0.05, 0.05],
                        [0.05, 0.05, 0.1, 0.2, 0.6]])
    X = np.vstack([c + rng.normal(0, 0.01, (n, 5)) for c in centers])
    return X, np.repeat(np.arange(3), n)


def same_partition(a, b):
    return all(len(set(b[a == g])) == 1 for g in np.unique(a)) and \
        len(np.unique(a)) == len(np.unique(b))


def test_planted_clusters_recovered(rng):
    X, truth = three_blobs(rng)
    groups = pca_kmeans_groups(X, 3, seed=0)
    assert same_partition(groups.group_of, truth)
    assert groups.pc_scores.shape == (60, 2)


def test_duplicates_share_labels(rng):
    X, _ = three_blobs(rng, 10)
    X2 = np.vstack([X, X[:7]])
    labels = pca_kmeans_groups(X2, 3).group_of
    np.testing.assert_array_equal(labels[:7], labels[30:])


def test_partition_invariant_to_row_order(rng):
    X, _ = three_blobs(rng)
    perm = rng.permutation(len(X))
    a = pca_kmeans_groups(X, 3, seed=4).group_of
    b = pca_kmeans_groups(X[perm], 3, seed=4).group_of
    assert same_partition(a[perm], b)
    # canonical labeling: ordered by first principal score
    np.testing.assert_array_equal(a[perm], b)


def test_groups_deterministic(rng):
    X = rng.dirichlet(np.ones(5), 40)
    a = pca_kmeans_groups(X, 3, seed=1).group_of
    b = pca_kmeans_groups(X, 3, seed=1).group_of
    np.testing.assert_array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_lloyd_objective_nonincreasing(seed):
    X = np.random.default_rng(seed).normal(size=(50, 2))
    _, _, trace = lloyd_kmeans(X, 3, seed=seed, n_init=1)
    assert np.all(np.diff(trace) <= 1e-12)


def test_too_few_defenders():
    with pytest.raises(ValueError):
        DefenderTypeClustering(3).fit(np.eye(5)[:2])


def _parked_possession(T, offense_xy):
    off = np.tile(np.asarray(offense_xy, float), (T, 1, 1))
    return Possession("p", np.arange(T) / 25.0, off, off, off[:, 0], np.zeros(T, int),
                      defense_ids=(10, 11, 12, 13, 14))


def test_time_in_basis_parked_offender():
    regions = np.zeros(DEFAULT_COURT.n_tiles, int)
    xy = [(5, 25), (20, 5), (20, 45), (30, 25), (40, 10)]
    for k, pt in enumerate(xy):
        regions[DEFAULT_COURT.tile_index(pt)] = k
    p = _parked_possession(20, xy)
    E = np.tile(np.eye(5), (20, 1, 1))
    ids, frac = defender_time_in_basis([MatchupPosterior(E, None, 0.0)], [p], regions, 5)
    np.testing.assert_array_equal(ids, [10, 11, 12, 13, 14])
    np.testing.assert_allclose(frac, np.eye(5))


def test_time_in_basis_uniform_wanderer(rng):
    # two regions split the court by depth: x < 10 covers 10/47 of the area
    centers = DEFAULT_COURT.tile_centers()
    regions = (centers[:, 0] > 10).astype(int)
    T = 4000
    off = np.column_stack([rng.uniform(0, 47, T * 5), rng.uniform(0, 50, T * 5)]).reshape(T, 5, 2)
    p = Possession("w", np.arange(T) / 25.0, off, off, off[:, 0], np.zeros(T, int))
    E = rng.dirichlet(np.ones(5), (T, 5))
    _, frac = defender_time_in_basis([MatchupPosterior(E, None, 0.0)], [p], regions, 2)
    np.testing.assert_allclose(frac[:, 0], 10 / 47, atol=0.02)
    assert np.all(frac >= 0) and np.all(frac.sum(1) <= 1 + 1e-12)


def test_two_node_graph():
    g = OffenderGraph(np.array([[0, 1], [1, 0]]), zeta=0.9)
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(np.eye(2) - 0.9 * g.M).real), [0.1, 1.9])
    min_eig, asym = car_precision_check(g)
    assert min_eig > 0 and asym == 0


def test_ring_graph_pd():
    n = 10
    A = np.zeros((n, n), int)
    for i in range(n):
        A[i, (i + 1) % n] = A[(i + 1) % n, i] = 1
    g = OffenderGraph(A, zeta=0.9)
    min_eig, _ = car_precision_check(g)
    # oracle: precision is 2 I - 0.9 A, eigenvalues 2 - 1.8 cos(2 pi j / n)
    ref = min(2 - 1.8 * np.cos(2 * np.pi * j / n) for j in range(n))
    assert min_eig == pytest.approx(ref, rel=1e-10)


def test_zeta_one_is_singular():
    A = np.ones((4, 4), int) - np.eye(4, dtype=int)
    with pytest.raises(CARPriorError):
        car_precision_check(OffenderGraph(A, zeta=1.0))


def test_union_symmetrization():
    # point 3 is far away: its nearest neighbour is 2, but 2 is not close to 3 in rank
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [10.0, 0.0]])
    A = knn_union_adjacency(pts, k=1)
    assert A[3, 2] and A[2, 3]
    assert A.sum() == 2 * 3


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(15, 200))
def test_graph_properties(seed, n):
    W = np.random.default_rng(seed).dirichlet(np.ones(5), n)
    g = build_offender_graph(W, k=10, zeta=0.9)
    A = g.adjacency
    assert np.array_equal(A, A.T) and not np.any(np.diag(A))
    assert g.n_neighbors.min() >= 10
    np.testing.assert_allclose(g.M.sum(axis=1), 1.0)
    min_eig, asym = car_precision_check(g)
    assert min_eig > 0 and asym <= 1e-10
    # covariance matches the inverse precision
    np.testing.assert_allclose(g.covariance @ g.precision, np.eye(n), atol=1e-8)


def test_graph_validation():
    with pytest.raises(ValueError):
        OffenderGraph(np.array([[0, 1], [0, 0]]))
    with pytest.raises(ValueError):
        OffenderGraph(np.array([[1, 1], [1, 0]]))

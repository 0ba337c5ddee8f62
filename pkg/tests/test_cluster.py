import itertools

import numpy as np
import pytest

from sfdasv.cluster import (
    ClusterAssignment, ClusterConfig, ClusteringError, ahc, cluster, cosine_distance_matrix,
    kmeans, kmeans_plusplus, lloyd, purity, read_assignment, same_partition, write_assignment,
)
from sfdasv.core import l2_normalize, make_rng


def blobs(seed, k=4, per=10, dim=5, spread=0.1):
    rng = make_rng(seed)
    centers = rng.standard_normal((k, dim)) * 3
    truth = np.repeat(np.arange(k), per)
    return centers[truth] + spread * rng.standard_normal((k * per, dim)), truth


@pytest.mark.parametrize("seed", range(50))
def test_lloyd_inertia_never_increases(seed):
    rng = make_rng(seed)
    X = rng.standard_normal((60, 3))
    k = int(rng.integers(2, 8))
    _, _, trace = lloyd(X, kmeans_plusplus(X, k, rng), max_iter=100, tol=1e-9)
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def brute_force_inertia(X, k):
    n = X.shape[0]
    A = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int8)
    total = (X ** 2).sum()
    best = np.full(len(A), total)
    for c in range(k):
        mask = (A == c).astype(np.float64)
        counts = mask.sum(1)
        sums = mask @ X
        with np.errstate(divide="ignore", invalid="ignore"):
            best -= np.where(counts > 0, (sums ** 2).sum(1) / counts, 0.0)
    return best.min()


@pytest.mark.parametrize("seed", [0, 1])
def test_kmeans_matches_exhaustive_partition(seed):
    rng = make_rng(seed)
    X = rng.standard_normal((12, 2)) + np.repeat(np.array([[3, 0], [0, 3], [-3, -3]]), 4, axis=0)
    res = kmeans(X, ClusterConfig(k=3, seed=seed))
    assert res.inertia == pytest.approx(brute_force_inertia(l2_normalize(X), 3), abs=1e-9)


def brute_force_average_linkage(X, k):
    D = cosine_distance_matrix(X)
    clusters = {i: [i] for i in range(len(X))}
    merges = []
    while len(clusters) > k:
        best = None
        for a, b in itertools.combinations(sorted(clusters), 2):
            d = np.mean([D[p, q] for p in clusters[a] for q in clusters[b]])
            if best is None or d < best[0]:
                best = (d, a, b)
        d, a, b = best
        merges.append((a, b, d))
        clusters[a] += clusters.pop(b)
    return merges


def test_ahc_merge_order_matches_oracle():
    angles = np.deg2rad([0, 7, 40, 52, 110, 200])
    X = np.column_stack([np.cos(angles), np.sin(angles)]) * np.array([1, 2, 0.5, 3, 1, 2])[:, None]
    res = ahc(X, 1)
    oracle = brute_force_average_linkage(X, 1)
    assert [(i, j) for i, j, _ in res.history] == [(a, b) for a, b, _ in oracle]
    np.testing.assert_allclose([d for *_, d in res.history], [d for *_, d in oracle], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ahc_random_sets_match_oracle(seed):
    X = make_rng(seed).standard_normal((9, 4))
    res = ahc(X, 2)
    oracle = brute_force_average_linkage(X, 2)
    assert [(i, j) for i, j, _ in res.history] == [(a, b) for a, b, _ in oracle]


@pytest.mark.parametrize("method", ["kmeans", "ahc"])
def test_near_directions_grouped(method):
    angles = np.deg2rad([0, 5, 90])
    X = np.column_stack([np.cos(angles), np.sin(angles)])
    res = cluster(X, ClusterConfig(k=2, method=method))
    assert same_partition(res.labels, [0, 0, 1])


@pytest.mark.parametrize("method", ["kmeans", "ahc"])
def test_separable_blobs_recovered(method):
    X, truth = blobs(3)
    res = cluster(X, ClusterConfig(k=4, method=method))
    assert purity(res, truth) == 1.0
    assert same_partition(res.labels, truth)


@pytest.mark.parametrize("method", ["kmeans", "ahc"])
def test_k_equals_n_gives_singletons(method):
    X = make_rng(4).standard_normal((5, 3))
    res = cluster(X, ClusterConfig(k=5, method=method))
    assert sorted(res.labels.tolist()) == [0, 1, 2, 3, 4]


def test_kmeans_deterministic_and_scale_invariant():
    X, _ = blobs(5)
    a = kmeans(X, ClusterConfig(k=4, seed=11))
    b = kmeans(X, ClusterConfig(k=4, seed=11))
    c = kmeans(X * 7.5, ClusterConfig(k=4, seed=11))
    assert a.labels.tolist() == b.labels.tolist() == c.labels.tolist()


@pytest.mark.parametrize("method", ["kmeans", "ahc"])
def test_permuting_items_permutes_partition(method):
    X, _ = blobs(6, k=3)
    perm = make_rng(1).permutation(len(X))
    a = cluster(X, ClusterConfig(k=3, method=method)).labels
    b = cluster(X[perm], ClusterConfig(k=3, method=method)).labels
    assert same_partition(a[perm], b)


def test_errors():
    with pytest.raises(ValueError):
        ClusterConfig(k=1)
    with pytest.raises(ValueError):
        ClusterConfig(k=2, method="dbscan")
    with pytest.raises(ClusteringError):
        kmeans(np.eye(2), ClusterConfig(k=3))
    with pytest.raises(ClusteringError):
        kmeans(np.ones((5, 2)), ClusterConfig(k=2))
    with pytest.raises(ClusteringError):
        ahc(np.eye(2), 3)


@pytest.mark.parametrize("labels, truth, expected", [
    ([0, 0, 1, 1], ["a", "a", "b", "b"], 1.0),
    ([0, 1, 2, 3], ["a", "a", "b", "b"], 1.0),  # refinement
    ([0, 0, 0, 0], ["a", "a", "b", "b"], 0.5),
    ([0, 0, 1], ["a", "b", "b"], 2 / 3),
])
def test_purity_examples(labels, truth, expected):
    assert purity(labels, truth) == pytest.approx(expected)


def test_purity_length_mismatch():
    with pytest.raises(ValueError):
        purity([0, 1], ["a"])


def test_same_partition():
    assert same_partition([0, 0, 1], [5, 5, 2])
    assert not same_partition([0, 0, 1], [0, 1, 1])
    assert not same_partition([0, 1], [0, 0])


def test_assignment_file_round_trip(tmp_path):
    res = ClusterAssignment(np.array([1, 0, 1]), 2, inertia=0.123456789)
    write_assignment(tmp_path / "a.tsv", ["x", "y", "z"], res)
    ids, labels, inertia = read_assignment(tmp_path / "a.tsv")
    assert ids == ["x", "y", "z"] and labels.tolist() == [1, 0, 1] and inertia == 0.123456789

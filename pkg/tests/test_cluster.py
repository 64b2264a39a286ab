import itertools

import numpy as np
import pytest

from painmkl import cluster
from painmkl.features import SessionDescriptor, session_descriptors


def descs(P, prefix="s"):
    return [SessionDescriptor(f"{prefix}{i:02d}", np.asarray(p, float)) for i, p in enumerate(P)]


def planted(rng, sizes=(5, 5), sep=10.0, spread=0.1, dim=3):
    centers = rng.standard_normal((len(sizes), dim))
    centers *= sep / np.min([np.linalg.norm(a - b) for a, b in itertools.combinations(centers, 2)])
    pts = np.vstack([c + spread * rng.standard_normal((n, dim)) for c, n in zip(centers, sizes)])
    truth = np.repeat(np.arange(len(sizes)), sizes)
    return pts, truth


def brute_force_partition(X, T):
    """Minimum-WCSS partition by enumerating every labeling."""
    best = (np.inf, None)
    for labels in itertools.product(range(T), repeat=len(X)):
        labels = np.array(labels)
        if labels[0] != 0 or len(set(labels)) < T:
            continue
        w = sum(np.sum((X[labels == k] - X[labels == k].mean(0)) ** 2) for k in range(T))
        if w < best[0] - 1e-12:
            best = (w, labels)
    return best[1]


def rand_pairs_oracle(a, b):
    """ARI from explicit pair counting."""
    n = len(a)
    pairs = list(itertools.combinations(range(n), 2))
    same_a = np.array([a[i] == a[j] for i, j in pairs])
    same_b = np.array([b[i] == b[j] for i, j in pairs])
    both = np.sum(same_a & same_b)
    expected = same_a.sum() * same_b.sum() / len(pairs)
    top = (same_a.sum() + same_b.sum()) / 2
    return (both - expected) / (top - expected)


def test_similarity_examples():
    g = cluster.build_similarity(descs([[1, 2], [1, 2], [1, 2]]))
    np.testing.assert_array_equal(g.W, 1.0)
    g = cluster.build_similarity(descs([[0, 0], [3, 1]]), 0.10)
    assert g.W[0, 1] == pytest.approx(np.exp(-1), rel=1e-14)
    g = cluster.build_similarity(descs([[0, 0], [30, 10]]), 1e-14)
    np.testing.assert_allclose(g.W, 1.0, atol=1e-11)


def test_similarity_invariants(rng):
    g = cluster.build_similarity(descs(rng.standard_normal((8, 4))))
    assert np.max(np.abs(g.W - g.W.T)) <= 1e-12
    np.testing.assert_array_equal(np.diag(g.W), 1.0)
    assert np.all(g.W > 0) and np.all(g.W <= 1)
    np.testing.assert_allclose(g.degrees, g.W.sum(1))
    assert np.all(g.degrees >= 1)


def test_embedding_spectrum(rng):
    g = cluster.build_similarity(descs(rng.standard_normal((10, 3))), 0.5)
    emb = cluster.spectral_embed(g, 3)
    assert abs(emb.eigenvalues[0]) < 1e-10
    assert np.all(emb.eigenvalues >= -1e-10) and np.all(emb.eigenvalues <= 2 + 1e-10)
    np.testing.assert_allclose(emb.U_sym.T @ emb.U_sym, np.eye(3), atol=1e-8)
    first = emb.U[:, 0]
    np.testing.assert_allclose(first / first[0], 1.0, atol=1e-8)
    # random-walk eigen-equation  D^-1 W u = (1 - lambda) u
    P = g.W / g.degrees[:, None]
    for k in range(3):
        np.testing.assert_allclose(P @ emb.U[:, k], (1 - emb.eigenvalues[k]) * emb.U[:, k], atol=1e-8)


def test_two_cliques():
    P = [[0.0, 0.0]] * 4 + [[20.0, 0.0]] * 4
    emb = cluster.spectral_embed(cluster.build_similarity(descs(P), 1.0), 2)
    assert emb.eigenvalues[1] < 1e-10 and emb.eigenvalues[2] > 0.5
    U = emb.U
    assert np.ptp(U[:4], axis=0).max() < 1e-8 and np.ptp(U[4:], axis=0).max() < 1e-8
    assert np.linalg.norm(U[0] - U[4]) > 0.1


def test_embed_bounds():
    g = cluster.build_similarity(descs([[0.0], [1.0]]))
    with pytest.raises(ValueError):
        cluster.spectral_embed(g, 3)


def test_kmeans_trivial_cases(rng):
    X = rng.standard_normal((6, 2))
    assert set(cluster.kmeans(X, 1).mapping.values()) == {0}
    labels, wcss = cluster.kmeans_labels(X, 6)
    assert len(set(labels)) == 6 and wcss == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        cluster.kmeans_labels(X, 7)


@pytest.mark.parametrize("seed", range(20))
def test_kmeans_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    X, truth = planted(r, (4, 5), sep=10.0, spread=0.2)
    labels, _ = cluster.kmeans_labels(X, 2, seed=seed)
    oracle = brute_force_partition(X, 2)
    assert cluster.adjusted_rand_index(labels, oracle) == 1.0
    assert cluster.adjusted_rand_index(labels, truth) == 1.0


def test_kmeans_deterministic(rng):
    X, _ = planted(rng, (5, 5, 5), sep=2.0, spread=1.0)
    a = cluster.kmeans_labels(X, 3, seed=4)
    b = cluster.kmeans_labels(X, 3, seed=4)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]


def test_ari_against_pair_counting(rng):
    for _ in range(10):
        a, b = rng.integers(0, 3, 15), rng.integers(0, 4, 15)
        assert cluster.adjusted_rand_index(a, b) == pytest.approx(rand_pairs_oracle(a, b), abs=1e-12)
    assert cluster.adjusted_rand_index([0, 0, 1, 1], [5, 5, 2, 2]) == 1.0


def test_assign_tasks_single_task(rng):
    res = cluster.assign_tasks(descs(rng.standard_normal((5, 3))), 1)
    assert set(res.assignment.mapping.values()) == {0}


def test_assign_tasks_recovers_blocks_and_permutes(rng):
    X, truth = planted(rng, (4, 6, 5), sep=1.0, spread=0.02)
    d = descs(X)
    res = cluster.assign_tasks(d, 3, gamma=5.0)
    labels = res.assignment.tasks_for([x.session_id for x in d])
    assert cluster.adjusted_rand_index(labels, truth) == 1.0
    sorted_labels = labels[res.order]
    Wp = res.permuted_W
    same = sorted_labels[:, None] == sorted_labels[None, :]
    assert Wp[same].mean() > Wp[~same].mean()
    # relabeling invariance under session reordering
    p = rng.permutation(len(d))
    res2 = cluster.assign_tasks([d[i] for i in p], 3, gamma=5.0)
    labels2 = res2.assignment.tasks_for([x.session_id for x in d])
    assert cluster.adjusted_rand_index(labels, labels2) == 1.0
    again = cluster.assign_tasks(d, 3, gamma=5.0)
    assert again.assignment.mapping == res.assignment.mapping


def test_synthetic_cohort_recovered():
    from conftest import cohort_table

    cohort, _, table = cohort_table(noise_sd=0.01, seed=11)
    d = session_descriptors(table, "positive", "l1")
    res = cluster.assign_tasks(d, 3)
    ids = [x.session_id for x in d]
    assert cluster.adjusted_rand_index([cohort.truth[s] for s in ids], res.assignment.tasks_for(ids)) == 1.0


def test_diagnostics(rng):
    X, _ = planted(rng, (5, 5, 5), sep=1.0, spread=0.02)
    sweep = cluster.sweep_tasks(descs(X), [2, 3, 4], gamma=5.0)
    by_t = {s["T"]: s for s in sweep}
    assert max(by_t, key=lambda t: by_t[t]["eigengap"]) == 3
    assert by_t[3]["silhouette"] > 0.9


def test_assignment_validation():
    with pytest.raises(ValueError):
        cluster.TaskAssignment(2, {"a": 2})
    with pytest.raises(KeyError):
        cluster.TaskAssignment(1, {"a": 0}).task_of("b")

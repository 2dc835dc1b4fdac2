"""Clustering and silhouette validation against independent oracles.

Three oracles, written before the assertions they back and kept deliberately
naive:

* ``sse_optimal_partition`` enumerates every assignment of n points into K
  non-empty clusters and returns the minimum-SSE partition (global optimum).
* ``silhouette_oracle`` is a literal O(n^2) transcription of the coefficient
  definition using Python loops.
* ``density_oracle`` recomputes core points and reachable sets by hand for
  the small 1-D fixture.
"""

from fractions import Fraction
from itertools import product

import numpy as np
import pytest

from gridscout.cluster import (
    DBSCAN,
    BisectingKMeans,
    ClusteringConfig,
    ClusterModel,
    KMeans,
    export_assignments,
    fit_cluster_model,
    import_assignments,
    silhouette,
)
from gridscout.grid import GridSpec


def partition_of(labels):
    """Index partition as a comparable set of frozensets."""
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), set()).add(i)
    return frozenset(frozenset(g) for g in groups.values())


def sse_optimal_partition(X, k):
    """Global-minimum SSE partition by exhaustive enumeration."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    best, best_sse = None, np.inf
    for assign in product(range(k), repeat=n):
        if len(set(assign)) != k:
            continue
        sse = 0.0
        for c in range(k):
            members = X[[i for i in range(n) if assign[i] == c]]
            sse += ((members - members.mean(axis=0)) ** 2).sum()
        if sse < best_sse - 1e-12:
            best, best_sse = assign, sse
    return partition_of(best), best_sse


def silhouette_oracle(X, labels):
    """Per-point s_i via explicit loops; singletons and a=b=0 score 0."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    labels = np.asarray(labels)
    out = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = np.mean([np.linalg.norm(X[i] - X[j]) for j in range(n) if own[j] and j != i])
        b = min(
            np.mean([np.linalg.norm(X[i] - X[j]) for j in range(n) if labels[j] == c])
            for c in set(labels.tolist()) - {labels[i]}
        )
        if max(a, b) > 0:
            out[i] = (b - a) / max(a, b)
    return out


def density_oracle(X, eps, min_neighbors):
    """(core mask, neighborhood lists) by brute force."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    neigh = [
        [j for j in range(n) if np.linalg.norm(X[i] - X[j]) <= eps] for i in range(n)
    ]
    core = [len(nb) >= min_neighbors for nb in neigh]
    return core, neigh


FOUR_POINTS = np.array([0.0, 1.0, 10.0, 11.0])
SIX_POINTS = np.array([0.0, 1.0, 10.0, 11.0, 100.0, 101.0])


# -- k-means -------------------------------------------------------------


def test_kmeans_recovers_enumerated_optimum_on_two_pairs():
    expected, _ = sse_optimal_partition(FOUR_POINTS, 2)
    km = KMeans(n_clusters=2, seed=0).fit(FOUR_POINTS)
    assert partition_of(km.labels_) == expected == partition_of([0, 0, 1, 1])
    assert sorted(km.cluster_centers_.ravel().tolist()) == [0.5, 10.5]


def test_kmeans_singletons_when_k_equals_n():
    km = KMeans(n_clusters=4, seed=1).fit(FOUR_POINTS)
    assert km.inertia_ == 0.0
    assert partition_of(km.labels_) == frozenset(frozenset([i]) for i in range(4))


def test_kmeans_duplicated_dataset_keeps_partition():
    doubled = np.concatenate([FOUR_POINTS, FOUR_POINTS])
    km = KMeans(n_clusters=2, seed=0).fit(doubled)
    groups = partition_of(km.labels_)
    # each duplicate pair must land together, mirroring the original split
    assert partition_of(km.labels_[:4]) == partition_of([0, 0, 1, 1])
    assert partition_of(km.labels_[4:]) == partition_of([0, 0, 1, 1])
    assert len(groups) == 2


def test_kmeans_inertia_non_increasing(rng):
    for trial in range(20):
        X = rng.normal(size=(60, 3))
        km = KMeans(n_clusters=5, seed=trial).fit(X)
        hist = np.array(km.inertia_history_)
        assert (np.diff(hist) <= 1e-9).all()
        assert km.inertia_ == hist[-1]


def test_kmeans_deterministic_and_validates():
    a = KMeans(n_clusters=2, seed=3).fit(SIX_POINTS)
    b = KMeans(n_clusters=2, seed=3).fit(SIX_POINTS)
    np.testing.assert_array_equal(a.labels_, b.labels_)
    with pytest.raises(ValueError):
        KMeans(n_clusters=1).fit(FOUR_POINTS)
    with pytest.raises(ValueError):
        KMeans(n_clusters=5).fit(FOUR_POINTS)


def test_kmeans_empty_cluster_repair_keeps_k_clusters():
    # two far duplicate heaps cannot feed 3 centroids without the repair path
    X = np.array([0.0, 0.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0])
    model = KMeans(n_clusters=3, seed=0).fit(X).to_model()
    assert model.k_eff == 3
    assert model.sizes.sum() == 8
    assert (model.sizes >= 1).all()


# -- bisecting k-means ---------------------------------------------------


def test_bisecting_matches_kmeans_on_separated_pairs():
    bi = BisectingKMeans(n_clusters=2, seed=0).fit(FOUR_POINTS)
    km = KMeans(n_clusters=2, seed=0).fit(FOUR_POINTS)
    assert partition_of(bi.labels_) == partition_of(km.labels_)


def test_bisecting_finds_three_natural_pairs():
    expected, _ = sse_optimal_partition(SIX_POINTS, 3)
    bi = BisectingKMeans(n_clusters=3, seed=0).fit(SIX_POINTS)
    assert partition_of(bi.labels_) == expected
    assert expected == partition_of([0, 0, 1, 1, 2, 2])


def test_bisecting_singletons_when_k_equals_n():
    bi = BisectingKMeans(n_clusters=6, seed=2).fit(SIX_POINTS)
    assert partition_of(bi.labels_) == frozenset(frozenset([i]) for i in range(6))
    assert bi.inertia_ == 0.0


# -- density clustering --------------------------------------------------


def test_dbscan_hand_fixture():
    X = np.array([0.0, 0.5, 1.0, 10.0])
    core, _ = density_oracle(X, eps=0.6, min_neighbors=3)
    assert core == [False, True, False, False]  # only 0.5 reaches 3 neighbors

    db = DBSCAN(eps=0.6, min_neighbors=3).fit(X)
    np.testing.assert_array_equal(db.core_mask_, core)
    assert db.labels_.tolist() == [0, 0, 0, -1]

    model = db.to_model()
    assert model.k_eff == 2
    assert model.noise_label == 1
    assert model.sizes.tolist() == [3, 1]


def test_dbscan_single_cluster_when_eps_covers_everything():
    model = DBSCAN(eps=1000.0, min_neighbors=1).fit(SIX_POINTS).to_model()
    assert model.k_eff == 1
    assert model.noise_label is None
    assert model.sizes.tolist() == [6]


def test_dbscan_identical_points_form_one_cluster():
    X = np.zeros(5)
    model = DBSCAN(eps=0.1, min_neighbors=5).fit(X).to_model()
    assert model.k_eff == 1
    assert model.noise_label is None


def test_dbscan_all_noise_becomes_single_pseudo_cluster():
    X = np.array([0.0, 10.0, 20.0, 30.0])
    model = DBSCAN(eps=0.5, min_neighbors=2).fit(X).to_model()
    assert model.k_eff == 1
    assert model.noise_label == 0
    assert model.sizes.tolist() == [4]


def test_dbscan_partition_is_order_invariant(rng):
    X = np.concatenate(
        [rng.normal(0, 0.3, size=40), rng.normal(8, 0.3, size=40), [50.0, 60.0]]
    )
    reference = DBSCAN(eps=1.0, min_neighbors=4).fit(X).to_model()
    ref_partition = partition_of(reference.labels)
    for shuffle in range(20):
        perm = np.random.default_rng(shuffle).permutation(X.size)
        model = DBSCAN(eps=1.0, min_neighbors=4).fit(X[perm]).to_model()
        # map shuffled labels back to original indices before comparing
        unshuffled = np.empty(X.size, dtype=np.int64)
        unshuffled[perm] = model.labels
        assert partition_of(unshuffled) == ref_partition


# -- config and model plumbing -------------------------------------------


def test_clustering_config_builds_and_validates():
    assert isinstance(ClusteringConfig(algorithm="kmeans", n_clusters=3).build(), KMeans)
    assert isinstance(
        ClusteringConfig(algorithm="bisecting_kmeans", n_clusters=3).build(), BisectingKMeans
    )
    assert isinstance(ClusteringConfig(algorithm="dbscan", eps=1.0).build(), DBSCAN)
    with pytest.raises(ValueError):
        ClusteringConfig(algorithm="spectral")
    with pytest.raises(ValueError):
        ClusteringConfig(algorithm="kmeans", n_clusters=1)
    with pytest.raises(ValueError):
        ClusteringConfig(algorithm="dbscan", eps=0.0)
    with pytest.raises(ValueError):
        ClusteringConfig(algorithm="dbscan", min_neighbors=0)


def test_fit_cluster_model_sizes_always_sum_to_n(rng):
    X = rng.normal(size=(50, 2))
    for cfg in (
        ClusteringConfig(algorithm="kmeans", n_clusters=4, seed=1),
        ClusteringConfig(algorithm="bisecting_kmeans", n_clusters=4, seed=1),
        ClusteringConfig(algorithm="dbscan", eps=0.7, min_neighbors=3),
    ):
        model = fit_cluster_model(X, cfg)
        assert model.sizes.sum() == 50
        assert model.sizes.size == model.k_eff
        np.testing.assert_array_equal(
            model.sizes, np.bincount(model.labels, minlength=model.k_eff)
        )


def test_cluster_model_validation():
    with pytest.raises(ValueError):
        ClusterModel(labels=np.array([0, 0]), sizes=np.array([1, 1]), k_eff=2)
    with pytest.raises(ValueError):
        ClusterModel(labels=np.array([0, 2]), sizes=np.array([1, 1]), k_eff=2)
    with pytest.raises(ValueError):
        ClusterModel(labels=np.array([0]), sizes=np.array([1, 0]), k_eff=2)


def test_cell_weight_is_inverse_own_cluster_size():
    model = ClusterModel(labels=np.array([0, 0, 0, 1]), sizes=np.array([3, 1]), k_eff=2)
    np.testing.assert_allclose(model.cell_weight(), [1 / 3, 1 / 3, 1 / 3, 1.0])


# -- silhouette ----------------------------------------------------------


def test_silhouette_worked_value_two_pairs():
    model = ClusterModel(labels=np.array([0, 0, 1, 1]), sizes=np.array([2, 2]), k_eff=2)
    result = silhouette(FOUR_POINTS, model)
    exact = (Fraction(19, 21) + Fraction(17, 19)) / 2  # (9.5/10.5 + 8.5/9.5)/2
    assert abs(result.mean_score - float(exact)) < 1e-12
    assert round(result.mean_score, 5) == 0.89975
    np.testing.assert_allclose(
        result.coefficients, [9.5 / 10.5, 8.5 / 9.5, 8.5 / 9.5, 9.5 / 10.5], atol=1e-12
    )


def test_silhouette_matches_brute_force_on_seeded_datasets():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(10, 60))
        d = int(rng.integers(1, 5))
        X = rng.normal(size=(n, d))
        k = int(rng.integers(2, 5))
        model = KMeans(n_clusters=min(k, n), seed=seed).fit(X).to_model()
        result = silhouette(X, model, sample_cap=5000)
        np.testing.assert_allclose(
            result.coefficients, silhouette_oracle(X, model.labels), atol=1e-9
        )
        assert abs(result.mean_score - silhouette_oracle(X, model.labels).mean()) < 1e-9


def test_silhouette_coincident_clusters_score_zero():
    X = np.zeros((6, 2))
    labels = np.array([0, 0, 0, 1, 1, 1])
    model = ClusterModel(labels=labels, sizes=np.array([3, 3]), k_eff=2)
    result = silhouette(X, model)
    np.testing.assert_array_equal(result.coefficients, 0.0)  # a = b = 0 convention


def test_silhouette_singletons_score_zero():
    X = np.array([0.0, 0.1, 5.0])
    model = ClusterModel(labels=np.array([0, 0, 1]), sizes=np.array([2, 1]), k_eff=2)
    result = silhouette(X, model)
    assert result.coefficients[2] == 0.0
    np.testing.assert_allclose(result.coefficients[:2], silhouette_oracle(X, model.labels)[:2])


def test_silhouette_separated_clusters_near_one(rng):
    X = np.concatenate([rng.normal(0, 0.05, size=(30, 2)), rng.normal(50, 0.05, size=(30, 2))])
    labels = np.repeat([0, 1], 30)
    model = ClusterModel(labels=labels, sizes=np.array([30, 30]), k_eff=2)
    result = silhouette(X, model)
    assert (result.coefficients > 0.9).all()


def test_silhouette_subsample_uses_full_data_distances(rng):
    X = rng.normal(size=(80, 3))
    model = KMeans(n_clusters=3, seed=0).fit(X).to_model()
    capped = silhouette(X, model, sample_cap=25, seed=11)
    assert capped.sample_ids.size == 25
    oracle = silhouette_oracle(X, model.labels)  # full-data coefficients
    np.testing.assert_allclose(capped.coefficients, oracle[capped.sample_ids], atol=1e-9)


def test_silhouette_rejects_single_cluster():
    model = ClusterModel(labels=np.zeros(4, dtype=int), sizes=np.array([4]), k_eff=1)
    with pytest.raises(ValueError):
        silhouette(FOUR_POINTS, model)


# -- assignment CSV interop ----------------------------------------------


def test_assignment_round_trip_preserves_partition_and_noise(tmp_path):
    grid = GridSpec(rows=2, cols=3, patch_size_px=1, resolution_m_per_px=1.0)
    X = np.array([0.0, 0.1, 0.2, 0.3, 10.0, 20.0])
    model = DBSCAN(eps=0.5, min_neighbors=3).fit(X).to_model()
    assert model.noise_label is not None
    csv_path, summary_path = export_assignments(model, grid, tmp_path / "clusters.csv")
    assert summary_path.exists()
    loaded = import_assignments(csv_path, grid)
    np.testing.assert_array_equal(loaded.labels, model.labels)
    np.testing.assert_array_equal(loaded.sizes, model.sizes)
    assert loaded.k_eff == model.k_eff
    assert loaded.noise_label == model.noise_label


def test_assignment_import_validates_coverage(tmp_path):
    grid = GridSpec(rows=2, cols=2, patch_size_px=1, resolution_m_per_px=1.0)
    (tmp_path / "short.csv").write_text("row,col,cluster\n0,0,0\n0,1,0\n1,0,1\n")
    with pytest.raises(ValueError, match="every grid cell"):
        import_assignments(tmp_path / "short.csv", grid)
    (tmp_path / "cols.csv").write_text("row,col\n0,0\n")
    with pytest.raises(ValueError, match="missing column"):
        import_assignments(tmp_path / "cols.csv", grid)
    with pytest.raises(FileNotFoundError):
        import_assignments(tmp_path / "absent.csv", grid)

"""Clustering of per-cell features and silhouette validation.

Three clusterers (Lloyd k-means with k-means++ seeding, bisecting k-means,
and density clustering) follow the sklearn estimator protocol. A fitted
estimator exports a ClusterModel -- the label/size view consumed by the
inverse-cluster-size sampling surface. Density-clustering noise points are
collected under one dedicated pseudo-cluster so downstream weighting treats
"unlike everything else" as its own (typically small, hence heavily
sampled) group.

All distances are Euclidean; cluster features beforehand with
features.standardize unless the caller has a reason not to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin

from .grid import GridSpec

ALGORITHMS = ("kmeans", "bisecting_kmeans", "dbscan")


@dataclass
class ClusterModel:
    """Per-cell cluster assignment with realized cluster count and sizes."""

    labels: np.ndarray  # (n,) ints in [0, k_eff)
    sizes: np.ndarray  # (k_eff,) member counts
    k_eff: int
    centroids: np.ndarray | None = None
    noise_label: int | None = None  # pseudo-cluster holding density-clustering noise

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        if self.k_eff < 1:
            raise ValueError("a cluster model needs at least one cluster")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k_eff):
            raise ValueError("labels outside [0, k_eff)")
        counts = np.bincount(self.labels, minlength=self.k_eff)
        if self.sizes.shape != (self.k_eff,) or (counts < 1).any():
            raise ValueError("every cluster label in [0, k_eff) must be non-empty")
        if (self.sizes != counts).any():
            raise ValueError("declared cluster sizes do not match the labels")

    @property
    def n(self) -> int:
        return self.labels.size

    def cell_weight(self) -> np.ndarray:
        """Inverse size of each point's own cluster: 1 / C_i."""
        return 1.0 / self.sizes[self.labels]


def _as_float64(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature array, got shape {X.shape}")
    return X


def _sq_dists(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] + (centers * centers).sum(axis=1)[None, :]
    d -= 2.0 * (X @ centers.T)
    return np.maximum(d, 0.0)


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = int(rng.integers(n))  # remaining points coincide with chosen centers
        centers[c] = X[idx]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def _assign_with_repair(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid assignment; empty clusters are reseeded from the point
    currently farthest from its own centroid (which is pinned to the reseeded
    cluster). Returns (labels, centers), with centers possibly rewritten."""
    k = centers.shape[0]
    d = _sq_dists(X, centers)
    labels = d.argmin(axis=1)
    cost = d[np.arange(X.shape[0]), labels].copy()
    repaired = False
    while True:
        counts = np.bincount(labels, minlength=k)
        empties = np.flatnonzero(counts == 0)
        if empties.size == 0:
            break
        if not repaired:
            centers = centers.copy()
            repaired = True
        donor = int(cost.argmax())  # pinned donors carry cost -1, never re-stolen
        labels[donor] = empties[0]
        centers[empties[0]] = X[donor]
        cost[donor] = -1.0
    return labels, centers


def _lloyd(
    X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """One seeded Lloyd run. Returns (labels, centers, inertia, inertia trace)."""
    centers = _kmeans_pp_init(X, k, rng)
    history: list[float] = []
    for _ in range(max_iter):
        labels, centers = _assign_with_repair(X, centers)
        history.append(float(((X - centers[labels]) ** 2).sum()))
        new_centers = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break
    labels, centers = _assign_with_repair(X, centers)
    history.append(float(((X - centers[labels]) ** 2).sum()))
    return labels, centers, history[-1], history


class KMeans(BaseEstimator, ClusterMixin):
    """Lloyd k-means with seeded k-means++ initialization.

    Stops when the largest centroid shift drops below ``tol`` or after
    ``max_iter`` rounds; the final assignment is always nearest-centroid.
    ``inertia_history_`` records the within-cluster sum of squares after
    every assignment, a non-increasing sequence.
    """

    def __init__(self, n_clusters: int = 8, seed: int = 0, max_iter: int = 300, tol: float = 1e-4):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = _as_float64(X)
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if X.shape[0] < self.n_clusters:
            raise ValueError(f"{X.shape[0]} points cannot form {self.n_clusters} clusters")
        rng = np.random.default_rng(self.seed)
        labels, centers, inertia, history = _lloyd(X, self.n_clusters, rng, self.max_iter, self.tol)
        self.labels_ = labels
        self.cluster_centers_ = centers
        self.inertia_ = inertia
        self.inertia_history_ = history
        return self

    def to_model(self) -> ClusterModel:
        sizes = np.bincount(self.labels_, minlength=self.n_clusters)
        return ClusterModel(
            labels=self.labels_,
            sizes=sizes,
            k_eff=self.n_clusters,
            centroids=self.cluster_centers_,
        )


class BisectingKMeans(BaseEstimator, ClusterMixin):
    """Top-down k-means: repeatedly 2-means-split the cluster with the
    largest within-cluster sum of squares until ``n_clusters`` exist."""

    def __init__(self, n_clusters: int = 8, seed: int = 0, max_iter: int = 300, tol: float = 1e-4):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = _as_float64(X)
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if X.shape[0] < self.n_clusters:
            raise ValueError(f"{X.shape[0]} points cannot form {self.n_clusters} clusters")
        rng = np.random.default_rng(self.seed)
        members: list[np.ndarray] = [np.arange(X.shape[0])]
        while len(members) < self.n_clusters:
            wcss = [
                ((X[idx] - X[idx].mean(axis=0)) ** 2).sum() if idx.size >= 2 else -1.0
                for idx in members
            ]
            target = int(np.argmax(wcss))  # ties resolve to the lowest index
            idx = members[target]
            sub_labels, _, _, _ = _lloyd(X[idx], 2, rng, self.max_iter, self.tol)
            members[target] = idx[sub_labels == 0]
            members.append(idx[sub_labels == 1])
        labels = np.empty(X.shape[0], dtype=np.int64)
        for c, idx in enumerate(members):
            labels[idx] = c
        self.labels_ = labels
        self.cluster_centers_ = np.stack([X[idx].mean(axis=0) for idx in members])
        self.inertia_ = float(((X - self.cluster_centers_[labels]) ** 2).sum())
        return self

    def to_model(self) -> ClusterModel:
        sizes = np.bincount(self.labels_, minlength=self.n_clusters)
        return ClusterModel(
            labels=self.labels_,
            sizes=sizes,
            k_eff=self.n_clusters,
            centroids=self.cluster_centers_,
        )


class DBSCAN(BaseEstimator, ClusterMixin):
    """Density clustering: a point is core iff its eps-ball (self included)
    holds at least ``min_neighbors`` points; clusters are the connected
    components of core points plus reachable border points.

    ``labels_`` uses -1 for noise, like the wider ecosystem; ``to_model``
    folds noise into a dedicated pseudo-cluster with the last label.
    """

    def __init__(self, eps: float = 0.5, min_neighbors: int = 5):
        self.eps = eps
        self.min_neighbors = min_neighbors

    def fit(self, X, y=None):
        X = _as_float64(X)
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_neighbors < 1:
            raise ValueError("min_neighbors must be >= 1")
        n = X.shape[0]
        tree = cKDTree(X)
        neighborhoods = tree.query_ball_point(X, r=self.eps)
        core = np.array([len(nb) >= self.min_neighbors for nb in neighborhoods])
        labels = np.full(n, -1, dtype=np.int64)
        cluster = 0
        for i in range(n):
            if not core[i] or labels[i] != -1:
                continue
            labels[i] = cluster
            queue = [i]
            while queue:
                p = queue.pop()
                for q in neighborhoods[p]:
                    if labels[q] == -1:
                        labels[q] = cluster
                        if core[q]:
                            queue.append(q)
            cluster += 1
        self.labels_ = labels
        self.core_mask_ = core
        self.n_found_clusters_ = cluster
        return self

    def to_model(self) -> ClusterModel:
        labels = self.labels_.copy()
        k = int(self.n_found_clusters_)
        noise_label = None
        if (labels == -1).any():
            if k == 0:
                labels[:] = 0
                noise_label, k = 0, 1
            else:
                labels[labels == -1] = k
                noise_label = k
                k += 1
        sizes = np.bincount(labels, minlength=k)
        return ClusterModel(labels=labels, sizes=sizes, k_eff=k, noise_label=noise_label)


@dataclass
class ClusteringConfig:
    """Algorithm choice plus its hyperparameters, as one serializable unit."""

    algorithm: str = "kmeans"
    n_clusters: int = 8
    eps: float = 0.5
    min_neighbors: int = 5
    seed: int = 0
    max_iter: int = 300
    tol: float = 1e-4

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown clustering algorithm {self.algorithm!r}")
        if self.algorithm in ("kmeans", "bisecting_kmeans") and self.n_clusters < 2:
            raise ValueError("k-means variants need n_clusters >= 2")
        if self.algorithm == "dbscan":
            if self.eps <= 0:
                raise ValueError("dbscan needs eps > 0")
            if self.min_neighbors < 1:
                raise ValueError("dbscan needs min_neighbors >= 1")

    def build(self):
        if self.algorithm == "kmeans":
            return KMeans(self.n_clusters, seed=self.seed, max_iter=self.max_iter, tol=self.tol)
        if self.algorithm == "bisecting_kmeans":
            return BisectingKMeans(self.n_clusters, seed=self.seed, max_iter=self.max_iter, tol=self.tol)
        return DBSCAN(eps=self.eps, min_neighbors=self.min_neighbors)


def fit_cluster_model(X, cfg: ClusteringConfig) -> ClusterModel:
    """Fit the configured clusterer and return its ClusterModel."""
    return cfg.build().fit(np.asarray(X)).to_model()


@dataclass
class SilhouetteResult:
    """Per-point silhouette coefficients and their mean."""

    coefficients: np.ndarray  # (m,) one per scored point
    a: np.ndarray  # mean intra-cluster distance
    b: np.ndarray  # mean nearest-other-cluster distance
    mean_score: float
    sample_ids: np.ndarray  # points the coefficients belong to

    def __post_init__(self) -> None:
        if self.coefficients.size and (
            self.coefficients.min() < -1.0 - 1e-12 or self.coefficients.max() > 1.0 + 1e-12
        ):
            raise ValueError("silhouette coefficients must lie in [-1, 1]")


def silhouette(X, model: ClusterModel, sample_cap: int = 5000, seed: int = 0) -> SilhouetteResult:
    """Silhouette coefficients s_i = (b_i - a_i) / max(a_i, b_i).

    a_i is the mean distance to the other members of i's cluster, b_i the
    smallest mean distance to any other cluster. Points in singleton
    clusters score 0, as do points with a_i = b_i = 0. When n exceeds
    ``sample_cap`` the coefficients are computed for a seeded uniform
    subsample of points, still using distances to the full dataset.
    """
    X = _as_float64(X)
    if model.k_eff < 2:
        raise ValueError("silhouette is undefined for a single-cluster model")
    if model.n != X.shape[0]:
        raise ValueError("model covers a different number of points than the features")
    n = X.shape[0]
    if n > sample_cap:
        rng = np.random.default_rng(seed)
        sample_ids = np.sort(rng.choice(n, size=sample_cap, replace=False))
    else:
        sample_ids = np.arange(n)

    labels = model.labels
    sizes = model.sizes.astype(np.float64)
    m, k = sample_ids.size, model.k_eff
    cluster_sums = np.empty((m, k))
    # distances from the sample to every point, in row chunks to bound memory;
    # accumulated per dimension (the norm-expansion trick cancels catastrophically
    # for close points far from the origin)
    chunk = max(1, int(2e6) // max(n, 1))
    for start in range(0, m, chunk):
        rows = sample_ids[start : start + chunk]
        d2 = np.zeros((rows.size, n))
        for j in range(X.shape[1]):
            diff = X[rows, j][:, None] - X[None, :, j]
            d2 += diff * diff
        d = np.sqrt(d2)
        for c in range(k):
            cluster_sums[start : start + chunk, c] = d[:, labels == c].sum(axis=1)

    own = labels[sample_ids]
    own_size = sizes[own]
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(own_size > 1, cluster_sums[np.arange(m), own] / np.maximum(own_size - 1, 1), 0.0)
    mean_to = cluster_sums / sizes[None, :]
    mean_to[np.arange(m), own] = np.inf
    b = mean_to.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s = np.where(own_size > 1, s, 0.0)  # singleton convention
    return SilhouetteResult(
        coefficients=s, a=a, b=b, mean_score=float(s.mean()), sample_ids=sample_ids
    )


def export_assignments(model: ClusterModel, grid: GridSpec, csv_path: str | Path) -> tuple[Path, Path]:
    """Write the assignment CSV (row,col,cluster) and its JSON summary."""
    if model.n != grid.n_cells:
        raise ValueError(f"model covers {model.n} cells for a {grid.n_cells}-cell grid")
    csv_path = Path(csv_path)
    ids = np.arange(grid.n_cells)
    frame = pd.DataFrame(
        {"row": ids // grid.cols, "col": ids % grid.cols, "cluster": model.labels}
    )
    frame.to_csv(csv_path, index=False)
    summary = {
        "k_eff": int(model.k_eff),
        "noise_label": None if model.noise_label is None else int(model.noise_label),
        "sizes": [int(s) for s in model.sizes],
    }
    summary_path = csv_path.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    return csv_path, summary_path


def import_assignments(csv_path: str | Path, grid: GridSpec) -> ClusterModel:
    """Read a ClusterModel back from an assignment CSV."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise FileNotFoundError(f"cluster assignment file not found: {csv_path}")
    frame = pd.read_csv(csv_path)
    for col in ("row", "col", "cluster"):
        if col not in frame.columns:
            raise ValueError(f"assignment CSV missing column {col!r}")
    ids = frame["row"].to_numpy(np.int64) * grid.cols + frame["col"].to_numpy(np.int64)
    if np.unique(ids).size != grid.n_cells or len(frame) != grid.n_cells:
        raise ValueError("assignment CSV must cover every grid cell exactly once")
    labels = np.empty(grid.n_cells, dtype=np.int64)
    labels[ids] = frame["cluster"].to_numpy(np.int64)
    k = int(labels.max()) + 1
    summary_path = csv_path.with_suffix(".summary.json")
    noise_label = None
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        noise_label = summary.get("noise_label")
    sizes = np.bincount(labels, minlength=k)
    return ClusterModel(labels=labels, sizes=sizes, k_eff=k, noise_label=noise_label)

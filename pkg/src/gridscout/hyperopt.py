"""Unsupervised hyperparameter selection for the cluster-weighted surface.

With no labels there is no direct way to score a featurizer/clusterer
combination, so configurations are ranked by how close the mean silhouette
score sits to zero: the search minimizes |mean silhouette|. The search is
two-stage -- a seeded quasi-random sweep of the space followed by local
perturbations of the best point -- which keeps it reproducible and cheap at
desk scale. The companion sweep utility measures, under a ground-truth
oracle, how well |silhouette| tracks the actual sampling cost (draws needed
to expose m positives), reporting their Spearman rank correlation.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc, spearmanr

from .cluster import ClusteringConfig, ClusterModel, fit_cluster_model, silhouette
from .features import FeatureMatrix
from .grid import GridSpec
from .simulate import GroundTruth, samples_to_positives, stable_seed
from .surface import SamplingStrategy, StrategyConfig

WORST_OBJECTIVE = 1.0  # assigned when a config collapses below 2 clusters


@dataclass
class SearchSpace:
    """Ranges the tuner may draw configurations from."""

    feature_choices: tuple[str, ...]
    algorithms: tuple[str, ...] = ("kmeans", "bisecting_kmeans", "dbscan")
    k_range: tuple[int, int] = (2, 16)
    eps_range: tuple[float, float] | None = None  # None: derive from data quantiles
    eta_range: tuple[int, int] = (2, 10)
    trials: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.feature_choices:
            raise ValueError("search space needs at least one feature choice")
        if not self.algorithms:
            raise ValueError("search space needs at least one algorithm")
        if self.trials < 1:
            raise ValueError("trial budget must be >= 1")
        if self.k_range[0] < 2 or self.k_range[1] < self.k_range[0]:
            raise ValueError(f"invalid K range {self.k_range}")
        if self.eta_range[0] < 1 or self.eta_range[1] < self.eta_range[0]:
            raise ValueError(f"invalid eta range {self.eta_range}")
        if self.eps_range is not None and not 0 < self.eps_range[0] <= self.eps_range[1]:
            raise ValueError(f"invalid eps range {self.eps_range}")


@dataclass
class TrialRecord:
    """One evaluated configuration."""

    index: int
    feature: str
    config: ClusteringConfig
    silhouette: float  # nan when undefined (collapsed clustering)
    objective: float  # |silhouette|, or WORST_OBJECTIVE when undefined
    k_eff: int
    wall_time_s: float
    cost_samples: float | None = None  # mean draws to m positives (sweeps only)


def default_eps_range(features: FeatureMatrix, seed: int = 0, sample: int = 500) -> tuple[float, float]:
    """[q01, q50] of pairwise distances over a seeded point subsample."""
    X = features.values.astype(np.float64)
    rng = np.random.default_rng(seed)
    if X.shape[0] > sample:
        X = X[rng.choice(X.shape[0], size=sample, replace=False)]
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    dists = np.sqrt(d2[np.triu_indices(X.shape[0], k=1)])
    dists = dists[dists > 0]
    if dists.size == 0:
        return (1e-3, 1.0)  # all points coincide; any eps clusters everything
    lo = float(np.quantile(dists, 0.01))
    hi = float(np.quantile(dists, 0.50))
    if lo <= 0:
        lo = float(dists.min())
    return (lo, max(hi, lo))


def _unit_to_config(u: np.ndarray, space: SearchSpace, eps_range: tuple[float, float]) -> tuple[str, ClusteringConfig]:
    feature = space.feature_choices[min(int(u[0] * len(space.feature_choices)), len(space.feature_choices) - 1)]
    algo = space.algorithms[min(int(u[1] * len(space.algorithms)), len(space.algorithms) - 1)]
    k_lo, k_hi = space.k_range
    k = k_lo + min(int(u[2] * (k_hi - k_lo + 1)), k_hi - k_lo)
    log_lo, log_hi = math.log(eps_range[0]), math.log(eps_range[1])
    eps = math.exp(log_lo + u[2] * (log_hi - log_lo))
    e_lo, e_hi = space.eta_range
    eta = e_lo + min(int(u[3] * (e_hi - e_lo + 1)), e_hi - e_lo)
    cfg = ClusteringConfig(
        algorithm=algo, n_clusters=k, eps=eps, min_neighbors=eta, seed=space.seed
    )
    return feature, cfg


def _perturb(
    base_feature: str,
    base: ClusteringConfig,
    space: SearchSpace,
    eps_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[str, ClusteringConfig]:
    k = int(np.clip(base.n_clusters + rng.integers(-2, 3), space.k_range[0], space.k_range[1]))
    eps = float(np.clip(base.eps * math.exp(rng.normal(0.0, 0.25)), eps_range[0], eps_range[1]))
    eta = int(np.clip(base.min_neighbors + rng.integers(-1, 2), space.eta_range[0], space.eta_range[1]))
    cfg = ClusteringConfig(
        algorithm=base.algorithm, n_clusters=k, eps=eps, min_neighbors=eta, seed=space.seed
    )
    return base_feature, cfg


def _evaluate(
    index: int,
    feature: str,
    cfg: ClusteringConfig,
    features_by_choice: dict[str, FeatureMatrix],
    sample_cap: int,
    seed: int,
) -> tuple[TrialRecord, ClusterModel]:
    start = time.perf_counter()
    model = fit_cluster_model(features_by_choice[feature].values, cfg)
    if model.k_eff < 2:
        sil, objective = float("nan"), WORST_OBJECTIVE
    else:
        sil = silhouette(features_by_choice[feature].values, model, sample_cap=sample_cap, seed=seed).mean_score
        objective = abs(sil)
    record = TrialRecord(
        index=index,
        feature=feature,
        config=cfg,
        silhouette=sil,
        objective=objective,
        k_eff=model.k_eff,
        wall_time_s=time.perf_counter() - start,
    )
    return record, model


def _resolve_eps_range(space: SearchSpace, features_by_choice: dict[str, FeatureMatrix]) -> tuple[float, float]:
    if space.eps_range is not None:
        return space.eps_range
    first = features_by_choice[space.feature_choices[0]]
    return default_eps_range(first, seed=space.seed)


def _generate_candidates(space: SearchSpace, eps_range, count: int) -> list[tuple[str, ClusteringConfig]]:
    sampler = qmc.Halton(d=4, scramble=True, seed=space.seed)
    return [_unit_to_config(u, space, eps_range) for u in sampler.random(count)]


def tune(
    features_by_choice: dict[str, FeatureMatrix],
    space: SearchSpace,
    sample_cap: int = 5000,
) -> tuple[TrialRecord, list[TrialRecord]]:
    """Pick the configuration minimizing |mean silhouette|.

    The first ceil(T/2) trials quasi-randomly cover the space; the rest
    perturb the best point found by the first stage. Degenerate clusterings
    (fewer than 2 realized clusters) score WORST_OBJECTIVE and can never
    win while any valid config exists. Deterministic given the space seed;
    ties break toward the lower trial index.
    """
    missing = [f for f in space.feature_choices if f not in features_by_choice]
    if missing:
        raise ValueError(f"no feature matrix provided for choices {missing}")
    eps_range = _resolve_eps_range(space, features_by_choice)

    n_explore = (space.trials + 1) // 2
    candidates = _generate_candidates(space, eps_range, n_explore)
    log = [
        _evaluate(i, feature, cfg, features_by_choice, sample_cap, space.seed)[0]
        for i, (feature, cfg) in enumerate(candidates)
    ]
    best = min(log, key=lambda r: (r.objective, r.index))

    rng = np.random.default_rng(space.seed + 1)
    for i in range(n_explore, space.trials):
        feature, cfg = _perturb(best.feature, best.config, space, eps_range, rng)
        log.append(_evaluate(i, feature, cfg, features_by_choice, sample_cap, space.seed)[0])
    best = min(log, key=lambda r: (r.objective, r.index))
    return best, log


@dataclass
class SweepResult:
    records: list[TrialRecord]
    spearman: float | None  # rank correlation of |silhouette| vs sampling cost
    m_positives: int
    n_seeds: int
    config_echo: dict = field(default_factory=dict)


def sweep_correlation(
    features_by_choice: dict[str, FeatureMatrix],
    truth: GroundTruth,
    grid: GridSpec,
    space: SearchSpace,
    m: int = 100,
    n_seeds: int = 3,
    sample_cap: int = 5000,
) -> SweepResult:
    """Measure how |silhouette| tracks true sampling cost across the space.

    For every quasi-random trial config, build the inverse-cluster-size
    surface and run offline sampling simulations until m positives surface
    (capped at the grid size), averaging over ``n_seeds`` seeded runs. Only
    meaningful where ground truth exists, i.e. simulation studies.
    """
    if m > truth.n_positive:
        raise ValueError(f"scene holds {truth.n_positive} positives; cannot sweep to m={m}")
    if n_seeds < 1:
        raise ValueError("need at least one simulation seed")
    eps_range = _resolve_eps_range(space, features_by_choice)
    records: list[TrialRecord] = []
    for i, (feature, cfg) in enumerate(_generate_candidates(space, eps_range, space.trials)):
        record, model = _evaluate(i, feature, cfg, features_by_choice, sample_cap, space.seed)
        strategy = SamplingStrategy(StrategyConfig(strategy="cluster_offline"), grid, model)
        costs = [
            samples_to_positives(strategy, truth, m, seed=stable_seed(space.seed, "sweep", i, s))
            for s in range(n_seeds)
        ]
        record.cost_samples = float(np.mean(costs))
        records.append(record)

    spearman = None
    if len(records) >= 2:
        objectives = [r.objective for r in records]
        costs = [r.cost_samples for r in records]
        rho = spearmanr(objectives, costs).statistic
        spearman = None if np.isnan(rho) else float(rho)
    return SweepResult(
        records=records,
        spearman=spearman,
        m_positives=m,
        n_seeds=n_seeds,
    )


def export_trials(records: list[TrialRecord], path: str | Path) -> Path:
    """Trial log CSV: trial,feature,algo,K,eps,eta,k_eff,silhouette,objective,cost_samples."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["trial", "feature", "algo", "K", "eps", "eta", "k_eff", "silhouette", "objective", "cost_samples"]
        )
        for r in records:
            kmeans_like = r.config.algorithm in ("kmeans", "bisecting_kmeans")
            writer.writerow(
                [
                    r.index,
                    r.feature,
                    r.config.algorithm,
                    r.config.n_clusters if kmeans_like else "",
                    f"{r.config.eps:.6g}" if not kmeans_like else "",
                    r.config.min_neighbors if not kmeans_like else "",
                    r.k_eff,
                    "" if np.isnan(r.silhouette) else f"{r.silhouette:.6g}",
                    f"{r.objective:.6g}",
                    "" if r.cost_samples is None else f"{r.cost_samples:.6g}",
                ]
            )
    return path

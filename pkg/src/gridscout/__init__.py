"""Label bootstrapping for rare objects in gridded raster scenes.

The package splits a large scene into a patch grid, featurizes and clusters
the patches without labels, and turns the cluster structure into a sampling
surface that decides which patches a human labels next. Online strategies
reweight the surface as positives come in, a simulation harness measures how
many positives each strategy surfaces per labeling budget, and an HTTP
service plus browser UI run the same loop with a real annotator.
"""

from .cluster import (
    DBSCAN,
    BisectingKMeans,
    ClusteringConfig,
    ClusterModel,
    KMeans,
    fit_cluster_model,
    silhouette,
)
from .features import (
    ColorStatsFeaturizer,
    FeatureMatrix,
    RandomConvFeaturizer,
    RcfConfig,
    build_featurizer,
    featurize_scene,
)
from .grid import GridSpec, PatchRef, RasterScene, load_scene, load_scene_manifest, make_grid
from .hyperopt import SearchSpace, TrialRecord, sweep_correlation, tune
from .rce import RceBatch, RceValue, rce_gradient, rce_loss
from .simulate import (
    GroundTruth,
    SyntheticScene,
    SyntheticSceneConfig,
    generate_synthetic,
    run_experiment,
    run_session,
    stable_seed,
)
from .surface import (
    RNG_ALGORITHM,
    STRATEGIES,
    SamplingStrategy,
    SamplingSurface,
    StrategyConfig,
    init_cluster_weighted,
    init_uniform,
)

__version__ = "0.1.0"

__all__ = [
    "BisectingKMeans",
    "ClusterModel",
    "ClusteringConfig",
    "ColorStatsFeaturizer",
    "DBSCAN",
    "FeatureMatrix",
    "GridSpec",
    "GroundTruth",
    "KMeans",
    "PatchRef",
    "RNG_ALGORITHM",
    "RasterScene",
    "RandomConvFeaturizer",
    "RceBatch",
    "RceValue",
    "RcfConfig",
    "STRATEGIES",
    "SamplingStrategy",
    "SamplingSurface",
    "SearchSpace",
    "StrategyConfig",
    "SyntheticScene",
    "SyntheticSceneConfig",
    "TrialRecord",
    "build_featurizer",
    "featurize_scene",
    "fit_cluster_model",
    "generate_synthetic",
    "init_cluster_weighted",
    "init_uniform",
    "load_scene",
    "load_scene_manifest",
    "make_grid",
    "rce_gradient",
    "rce_loss",
    "run_experiment",
    "run_session",
    "silhouette",
    "stable_seed",
    "sweep_correlation",
    "tune",
]

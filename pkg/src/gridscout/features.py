"""Per-patch feature extraction.

Two in-process featurizers (random convolutional features and per-channel
color statistics) follow the sklearn transformer protocol so they compose
with pipelines; externally computed embeddings enter through a CSV import.
All featurization is pure and thread-safe: patches may be processed
concurrently, output rows always follow linear patch id order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .grid import GridSpec, RasterScene, extract_all_patches

PROVENANCES = ("rcf", "colorstats", "external")


@dataclass
class FeatureMatrix:
    """One d-dimensional feature vector per grid cell, in linear id order."""

    values: np.ndarray  # (n_cells, d) float32
    provenance: str = "external"

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {self.values.shape}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature matrix contains NaN or Inf entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _as_patch_stack(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:  # single patch
        X = X[None, ...]
    if X.ndim != 4:
        raise ValueError(f"expected patches shaped (n, bands, p, p), got {X.shape}")
    if X.shape[2] == 0 or X.shape[3] == 0:
        raise ValueError("patches are empty")
    return X


class ColorStatsFeaturizer(BaseEstimator, TransformerMixin):
    """Mean, standard deviation, minimum and maximum of every channel.

    Stat order per channel is (mean, std, min, max); channels are
    concatenated in band order, so the output has 4 * bands columns.
    Standard deviation is the population value.
    """

    def fit(self, X, y=None):
        _as_patch_stack(X)
        return self

    def transform(self, X) -> np.ndarray:
        patches = _as_patch_stack(X)
        n, c = patches.shape[:2]
        flat = patches.reshape(n, c, -1).astype(np.float64)
        stats = np.stack(
            [flat.mean(axis=2), flat.std(axis=2), flat.min(axis=2), flat.max(axis=2)],
            axis=2,
        )  # (n, c, 4)
        return stats.reshape(n, 4 * c).astype(np.float32)


class RandomConvFeaturizer(BaseEstimator, TransformerMixin):
    """Random convolutional features: fixed Gaussian filters + ReLU + mean pool.

    Filters are drawn once per (seed, band count) from a standard normal over
    k x k x bands weights; feature m of a patch is the mean over valid
    (no-padding) positions of ReLU(conv(patch, filter_m) + bias_m). Output is
    a deterministic, pure function of (patch, parameters).
    """

    def __init__(self, num_filters: int = 256, filter_size: int = 3, bias: float = 0.0, seed: int = 0):
        self.num_filters = num_filters
        self.filter_size = filter_size
        self.bias = bias
        self.seed = seed

    def _check_params(self) -> None:
        if self.num_filters < 1:
            raise ValueError("num_filters must be >= 1")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError("filter_size must be odd and >= 1")

    def fit(self, X, y=None):
        self._check_params()
        patches = _as_patch_stack(X)
        bands = patches.shape[1]
        if self.filter_size > min(patches.shape[2], patches.shape[3]):
            raise ValueError(
                f"filter_size {self.filter_size} exceeds patch extent {patches.shape[2:]}"
            )
        rng = np.random.default_rng(self.seed)
        self.filters_ = rng.standard_normal(
            (self.num_filters, bands, self.filter_size, self.filter_size)
        ).astype(np.float64)
        biases = np.broadcast_to(np.asarray(self.bias, dtype=np.float64), (self.num_filters,))
        self.biases_ = np.array(biases)
        self.n_bands_ = bands
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "filters_"):
            raise RuntimeError("RandomConvFeaturizer is not fitted")
        patches = _as_patch_stack(X)
        if patches.shape[1] != self.n_bands_:
            raise ValueError(
                f"patches have {patches.shape[1]} bands; featurizer was fitted with {self.n_bands_}"
            )
        k = self.filter_size
        n, c, h, w = patches.shape
        if k > min(h, w):
            raise ValueError(f"filter_size {k} exceeds patch extent ({h}, {w})")
        # im2col over valid positions, then one matmul against all filters
        windows = np.lib.stride_tricks.sliding_window_view(patches, (k, k), axis=(2, 3))
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, -1, c * k * k).astype(np.float64)
        weights = self.filters_.reshape(self.num_filters, -1)
        responses = cols @ weights.T + self.biases_  # (n, positions, M)
        return np.maximum(responses, 0.0).mean(axis=1).astype(np.float32)


def featurize_scene(
    scene: RasterScene,
    grid: GridSpec,
    featurizer,
    n_workers: int | None = None,
) -> FeatureMatrix:
    """Run a featurizer over every grid cell, rows in linear id order.

    Patches are independent, so chunks may be processed on a thread pool;
    results land at fixed row offsets and ordering never depends on timing.
    """
    patches = extract_all_patches(scene, grid)
    featurizer.fit(patches[:1])
    provenance = "colorstats" if isinstance(featurizer, ColorStatsFeaturizer) else "rcf"
    if not n_workers or n_workers <= 1 or grid.n_cells < 2:
        return FeatureMatrix(featurizer.transform(patches), provenance=provenance)

    chunks = np.array_split(np.arange(grid.n_cells), min(n_workers * 4, grid.n_cells))
    out: list[np.ndarray | None] = [None] * len(chunks)

    def work(slot: int) -> None:
        out[slot] = featurizer.transform(patches[chunks[slot]])

    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        list(pool.map(work, range(len(chunks))))
    return FeatureMatrix(np.vstack([b for b in out if b is not None]), provenance=provenance)


def standardize(features: FeatureMatrix) -> FeatureMatrix:
    """Center each column to mean 0 and scale to population std 1.

    Constant columns become all-zeros rather than dividing by zero.
    """
    if features.n < 2:
        raise ValueError("standardize needs at least 2 rows")
    values = features.values.astype(np.float64)
    mu = values.mean(axis=0)
    sigma = values.std(axis=0)
    scale = np.where(sigma > 0, sigma, 1.0)
    return FeatureMatrix(((values - mu) / scale).astype(np.float32), provenance=features.provenance)


def feature_columns(dim: int) -> list[str]:
    return ["row", "col"] + [f"f{i}" for i in range(dim)]


def export_features(features: FeatureMatrix, grid: GridSpec, path: str | Path) -> Path:
    """Write the feature CSV (header row,col,f0..f{d-1}; one line per cell)."""
    if features.n != grid.n_cells:
        raise ValueError(f"feature matrix has {features.n} rows for a {grid.n_cells}-cell grid")
    path = Path(path)
    rows = np.arange(grid.n_cells) // grid.cols
    cols = np.arange(grid.n_cells) % grid.cols
    frame = pd.DataFrame(features.values, columns=[f"f{i}" for i in range(features.dim)])
    frame.insert(0, "col", cols)
    frame.insert(0, "row", rows)
    frame.to_csv(path, index=False)
    return path


def import_features(path: str | Path, grid: GridSpec) -> FeatureMatrix:
    """Read externally computed per-cell features from CSV.

    Rows may arrive in any order; they are sorted into linear patch id order.
    Every grid cell must appear exactly once, with a consistent column set and
    no missing values.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    frame = pd.read_csv(path)
    if list(frame.columns[:2]) != ["row", "col"]:
        raise ValueError(f"feature CSV must start with columns row,col; got {list(frame.columns[:2])}")
    dim = frame.shape[1] - 2
    if dim < 1:
        raise ValueError("feature CSV has no feature columns")
    expected = [f"f{i}" for i in range(dim)]
    if list(frame.columns[2:]) != expected:
        raise ValueError(f"feature columns must be f0..f{dim - 1} in order; got {list(frame.columns[2:])}")
    if frame.isna().any().any():
        raise ValueError(f"feature CSV {path} contains missing/NaN values")

    ids = frame["row"].to_numpy(dtype=np.int64) * grid.cols + frame["col"].to_numpy(dtype=np.int64)
    bad = (
        (frame["row"] < 0)
        | (frame["row"] >= grid.rows)
        | (frame["col"] < 0)
        | (frame["col"] >= grid.cols)
    )
    if bad.any():
        first = frame.loc[bad.idxmax()]
        raise ValueError(f"cell ({int(first.row)}, {int(first.col)}) outside {grid.rows}x{grid.cols} grid")
    unique, counts = np.unique(ids, return_counts=True)
    if (counts > 1).any():
        dup = grid.id_to_ref(int(unique[counts > 1][0]))
        raise ValueError(f"duplicate feature rows for cell ({dup.row}, {dup.col})")
    if unique.size != grid.n_cells:
        missing_id = int(np.setdiff1d(np.arange(grid.n_cells), unique)[0])
        ref = grid.id_to_ref(missing_id)
        raise ValueError(f"feature CSV missing cell ({ref.row}, {ref.col})")

    order = np.argsort(ids, kind="stable")
    values = frame.iloc[order, 2:].to_numpy(dtype=np.float32)
    return FeatureMatrix(values, provenance="external")


@dataclass
class RcfConfig:
    """Parameters of the random convolutional featurizer."""

    num_filters: int = 256
    filter_size: int = 3
    bias: float = 0.0
    seed: int = 0

    def build(self) -> RandomConvFeaturizer:
        return RandomConvFeaturizer(**self.__dict__)


def build_featurizer(method: str, rcf: RcfConfig | None = None):
    if method == "colorstats":
        return ColorStatsFeaturizer()
    if method == "rcf":
        return (rcf or RcfConfig()).build()
    raise ValueError(f"unknown featurization method {method!r} (expected rcf or colorstats)")

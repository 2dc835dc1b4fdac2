"""Featurizers: channel statistics, random convolutional features, CSV interop.

Oracles come first and are deliberately naive: the channel-stat oracle
recomputes each statistic with plain Python loops, and the 1x1-filter oracle
evaluates the random-convolution definition pixel by pixel.
"""

import numpy as np
import pytest

from gridscout.features import (
    ColorStatsFeaturizer,
    FeatureMatrix,
    RandomConvFeaturizer,
    RcfConfig,
    build_featurizer,
    export_features,
    feature_columns,
    featurize_scene,
    import_features,
    standardize,
)
from gridscout.grid import GridSpec, RasterScene, make_grid


def colorstats_oracle(patch):
    """Per-channel (mean, population std, min, max), channels concatenated."""
    out = []
    for band in patch:
        vals = [float(v) for v in band.ravel()]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        out.extend([mean, var**0.5, min(vals), max(vals)])
    return np.array(out)


def rcf_1x1_oracle(patch, weights, biases):
    """feature_m = mean over pixels of ReLU(w_m * pixel + b_m), single band."""
    feats = []
    for w, b in zip(weights, biases):
        acc = [max(0.0, float(w) * float(v) + float(b)) for v in patch[0].ravel()]
        feats.append(sum(acc) / len(acc))
    return np.array(feats)


# -- channel statistics -------------------------------------------------


def test_colorstats_constant_patch():
    patch = np.full((1, 4, 4), 5.0, dtype=np.float32)
    feats = ColorStatsFeaturizer().fit(patch).transform(patch)
    np.testing.assert_allclose(feats[0], [5, 0, 5, 5], atol=1e-6)


def test_colorstats_hand_value():
    # population std of {0,0,10,10} is 5, not the sample value
    patch = np.array([[[0.0, 0.0], [10.0, 10.0]]], dtype=np.float32)
    feats = ColorStatsFeaturizer().fit(patch).transform(patch)
    np.testing.assert_allclose(feats[0], [5, 5, 0, 10], atol=1e-6)


def test_colorstats_three_band_constant():
    patch = np.stack([np.full((2, 2), v, dtype=np.float32) for v in (1, 2, 3)])
    feats = ColorStatsFeaturizer().fit(patch).transform(patch)
    np.testing.assert_allclose(feats[0], [1, 0, 1, 1, 2, 0, 2, 2, 3, 0, 3, 3], atol=1e-6)


def test_colorstats_matches_loop_oracle(rng):
    patches = rng.normal(50, 12, size=(6, 3, 5, 5)).astype(np.float32)
    feats = ColorStatsFeaturizer().fit(patches).transform(patches)
    for i in range(6):
        np.testing.assert_allclose(feats[i], colorstats_oracle(patches[i]), rtol=1e-5)
    # structural sanity: min <= mean <= max and std >= 0 per channel
    stats = feats.reshape(6, 3, 4)
    assert (stats[:, :, 2] <= stats[:, :, 0] + 1e-5).all()
    assert (stats[:, :, 0] <= stats[:, :, 3] + 1e-5).all()
    assert (stats[:, :, 1] >= 0).all()


# -- random convolutional features --------------------------------------


def test_rcf_zero_patch_zero_bias_gives_zero_vector():
    patch = np.zeros((1, 1, 8, 8), dtype=np.float32)
    rcf = RandomConvFeaturizer(num_filters=16, filter_size=3, bias=0.0, seed=0).fit(patch)
    np.testing.assert_array_equal(rcf.transform(patch), np.zeros((1, 16), dtype=np.float32))


def test_rcf_zero_patch_nonzero_bias_gives_relu_bias():
    patch = np.zeros((1, 1, 8, 8), dtype=np.float32)
    rcf = RandomConvFeaturizer(num_filters=16, filter_size=3, bias=-0.25, seed=0).fit(patch)
    np.testing.assert_allclose(rcf.transform(patch)[0], np.zeros(16), atol=1e-7)
    rcf = RandomConvFeaturizer(num_filters=16, filter_size=3, bias=0.75, seed=0).fit(patch)
    np.testing.assert_allclose(rcf.transform(patch)[0], np.full(16, 0.75), atol=1e-6)


def test_rcf_1x1_filters_match_elementwise_oracle(rng):
    patches = rng.normal(0, 1, size=(4, 1, 6, 6)).astype(np.float32)
    rcf = RandomConvFeaturizer(num_filters=12, filter_size=1, bias=0.1, seed=9).fit(patches)
    feats = rcf.transform(patches)
    weights = rcf.filters_.reshape(12)
    for i in range(4):
        np.testing.assert_allclose(
            feats[i], rcf_1x1_oracle(patches[i], weights, rcf.biases_), rtol=1e-5
        )


def test_rcf_deterministic_given_seed(rng):
    patches = rng.normal(0, 1, size=(5, 2, 9, 9)).astype(np.float32)
    a = RandomConvFeaturizer(num_filters=32, seed=4).fit(patches).transform(patches)
    b = RandomConvFeaturizer(num_filters=32, seed=4).fit(patches).transform(patches)
    c = RandomConvFeaturizer(num_filters=32, seed=5).fit(patches).transform(patches)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rcf_parameter_validation():
    patch = np.zeros((1, 1, 4, 4), dtype=np.float32)
    with pytest.raises(ValueError):
        RandomConvFeaturizer(num_filters=0).fit(patch)
    with pytest.raises(ValueError):
        RandomConvFeaturizer(filter_size=2).fit(patch)
    with pytest.raises(ValueError):
        RandomConvFeaturizer(filter_size=5).fit(patch)
    with pytest.raises(RuntimeError):
        RandomConvFeaturizer().transform(patch)


def test_rcf_sklearn_params_round_trip():
    rcf = RandomConvFeaturizer(num_filters=64, filter_size=5, bias=0.2, seed=3)
    params = rcf.get_params()
    clone = RandomConvFeaturizer().set_params(**params)
    assert clone.get_params() == params


def test_build_featurizer_dispatch():
    assert isinstance(build_featurizer("colorstats"), ColorStatsFeaturizer)
    rcf = build_featurizer("rcf", RcfConfig(num_filters=8, filter_size=1, seed=2))
    assert isinstance(rcf, RandomConvFeaturizer)
    assert (rcf.num_filters, rcf.filter_size, rcf.seed) == (8, 1, 2)
    with pytest.raises(ValueError):
        build_featurizer("resnet18")


# -- scene featurization ------------------------------------------------


def test_featurize_scene_row_order_and_shape(small_scene):
    grid = make_grid(small_scene, 16)
    fm = featurize_scene(small_scene, grid, ColorStatsFeaturizer())
    assert fm.values.shape == (grid.n_cells, 16)
    assert fm.provenance == "colorstats"
    # row for cell (1, 2) equals featurizing that patch alone
    from gridscout.grid import PatchRef, extract_patch

    patch = extract_patch(small_scene, grid, PatchRef(1, 2))
    solo = ColorStatsFeaturizer().fit(patch).transform(patch)
    np.testing.assert_allclose(fm.values[grid.ref_to_id(PatchRef(1, 2))], solo[0], rtol=1e-6)


def test_featurize_scene_workers_do_not_change_output(small_scene):
    grid = make_grid(small_scene, 8)
    rcf = RandomConvFeaturizer(num_filters=24, seed=1)
    serial = featurize_scene(small_scene, grid, rcf, n_workers=None)
    threaded = featurize_scene(small_scene, grid, rcf, n_workers=4)
    np.testing.assert_array_equal(serial.values, threaded.values)
    assert serial.provenance == "rcf"


def test_feature_matrix_rejects_nonfinite():
    bad = np.array([[1.0, np.nan]], dtype=np.float32)
    with pytest.raises(ValueError):
        FeatureMatrix(bad)
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.inf]], dtype=np.float32))


# -- standardization -----------------------------------------------------


def test_standardize_two_point_column():
    fm = FeatureMatrix(np.array([[1.0], [3.0]], dtype=np.float32))
    out = standardize(fm)
    np.testing.assert_allclose(out.values, [[-1.0], [1.0]], atol=1e-6)


def test_standardize_constant_column_maps_to_zeros():
    fm = FeatureMatrix(np.array([[4.0, 1.0], [4.0, 2.0], [4.0, 3.0]], dtype=np.float32))
    out = standardize(fm)
    np.testing.assert_allclose(out.values[:, 0], 0.0, atol=1e-7)


def test_standardize_centers_and_is_idempotent(rng):
    fm = FeatureMatrix(rng.normal(5, 3, size=(40, 6)).astype(np.float32))
    once = standardize(fm)
    assert np.abs(once.values.mean(axis=0)).max() < 1e-6
    np.testing.assert_allclose(once.values.std(axis=0), 1.0, atol=1e-5)
    twice = standardize(once)
    np.testing.assert_allclose(twice.values, once.values, atol=1e-6)


# -- CSV interop ---------------------------------------------------------


def test_feature_csv_round_trip(tmp_path, rng):
    grid = GridSpec(rows=3, cols=4, patch_size_px=1, resolution_m_per_px=1.0)
    fm = FeatureMatrix(rng.normal(size=(12, 5)).astype(np.float32))
    path = export_features(fm, grid, tmp_path / "features.csv")
    assert path.read_text().splitlines()[0] == "row,col," + ",".join(feature_columns(5)[2:])
    loaded = import_features(path, grid)
    np.testing.assert_allclose(loaded.values, fm.values, rtol=1e-6)
    assert loaded.provenance == "external"


def test_feature_csv_import_is_order_independent(tmp_path, rng):
    grid = GridSpec(rows=2, cols=2, patch_size_px=1, resolution_m_per_px=1.0)
    fm = FeatureMatrix(rng.normal(size=(4, 2)).astype(np.float32))
    path = export_features(fm, grid, tmp_path / "features.csv")
    lines = path.read_text().splitlines()
    shuffled = [lines[0]] + lines[1:][::-1]
    (tmp_path / "shuffled.csv").write_text("\n".join(shuffled) + "\n")
    loaded = import_features(tmp_path / "shuffled.csv", grid)
    np.testing.assert_allclose(loaded.values, fm.values, rtol=1e-6)


def test_feature_csv_import_rejects_missing_and_duplicate_cells(tmp_path):
    grid = GridSpec(rows=2, cols=2, patch_size_px=1, resolution_m_per_px=1.0)
    header = "row,col,f0"
    (tmp_path / "missing.csv").write_text(f"{header}\n0,0,1.0\n0,1,2.0\n1,0,3.0\n")
    with pytest.raises(ValueError, match="missing"):
        import_features(tmp_path / "missing.csv", grid)
    rows = f"{header}\n0,0,1.0\n0,0,1.5\n0,1,2.0\n1,0,3.0\n1,1,4.0\n"
    (tmp_path / "dup.csv").write_text(rows)
    with pytest.raises(ValueError, match="duplicate"):
        import_features(tmp_path / "dup.csv", grid)
    (tmp_path / "nan.csv").write_text(f"{header}\n0,0,nan\n0,1,2.0\n1,0,3.0\n1,1,4.0\n")
    with pytest.raises(ValueError):
        import_features(tmp_path / "nan.csv", grid)

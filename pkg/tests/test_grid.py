"""Scene loading, grid geometry, and patch extraction."""

import json

import numpy as np
import pytest
from PIL import Image

from gridscout.grid import (
    GridSpec,
    PatchRef,
    RasterScene,
    default_render_settings,
    extract_all_patches,
    extract_patch,
    load_scene,
    load_scene_manifest,
    make_grid,
    render_patch_png,
    save_rawf32,
)


def test_make_grid_discards_partial_border(small_scene):
    # 64x96 px at patch 28 -> 2x3 grid, remainder dropped
    grid = make_grid(small_scene, 28)
    assert (grid.rows, grid.cols) == (2, 3)
    assert grid.n_cells == 6
    assert grid.patch_ground_m == 28 * 0.5


def test_make_grid_rejects_oversized_patch(small_scene):
    with pytest.raises(ValueError):
        make_grid(small_scene, 65)


def test_ref_id_round_trip():
    grid = GridSpec(rows=5, cols=7, patch_size_px=4, resolution_m_per_px=2.0)
    for cell_id in range(grid.n_cells):
        ref = grid.id_to_ref(cell_id)
        assert grid.ref_to_id(ref) == cell_id
    refs = list(grid.iter_refs())
    assert len(refs) == 35
    assert refs[0] == PatchRef(0, 0)
    assert refs[-1] == PatchRef(4, 6)
    assert [grid.ref_to_id(r) for r in refs] == list(range(35))


def test_ref_validation():
    grid = GridSpec(rows=2, cols=2, patch_size_px=1, resolution_m_per_px=1.0)
    grid.check_ref(PatchRef(1, 1))
    with pytest.raises(ValueError):
        grid.check_ref(PatchRef(2, 0))
    with pytest.raises(ValueError):
        grid.check_ref(PatchRef(0, -1))
    with pytest.raises(ValueError):
        grid.id_to_ref(4)


def test_extract_patch_matches_manual_slice(small_scene):
    grid = make_grid(small_scene, 16)
    block = extract_patch(small_scene, grid, PatchRef(2, 3))
    expected = small_scene.pixels[:, 32:48, 48:64]
    np.testing.assert_array_equal(block, expected)
    assert block.shape == (4, 16, 16)


def test_extract_all_patches_agrees_with_per_patch_path(small_scene):
    grid = make_grid(small_scene, 16)
    stack = extract_all_patches(small_scene, grid)
    assert stack.shape == (grid.n_cells, 4, 16, 16)
    for ref in grid.iter_refs():
        np.testing.assert_array_equal(
            stack[grid.ref_to_id(ref)], extract_patch(small_scene, grid, ref)
        )


def test_scene_shape_validation():
    with pytest.raises(ValueError):
        RasterScene(pixels=np.zeros((2, 2), dtype=np.float32), resolution_m_per_px=1.0)
    with pytest.raises(ValueError):
        RasterScene(pixels=np.zeros((1, 2, 2), dtype=np.float32), resolution_m_per_px=0.0)


def test_rawf32_round_trip(tmp_path, small_scene):
    path = save_rawf32(small_scene, tmp_path / "scene.rawf32")
    loaded = load_scene(path, "rawf32")
    np.testing.assert_array_equal(loaded.pixels, small_scene.pixels)
    assert loaded.resolution_m_per_px == small_scene.resolution_m_per_px


def test_rawf32_payload_size_mismatch_rejected(tmp_path, small_scene):
    path = save_rawf32(small_scene, tmp_path / "scene.rawf32")
    payload = np.fromfile(path, dtype="<f4")
    payload[:-7].tofile(path)  # truncate
    with pytest.raises(ValueError, match="declares"):
        load_scene(path, "rawf32")


def test_rawf32_requires_sidecar(tmp_path):
    raw = tmp_path / "orphan.rawf32"
    raw.write_bytes(b"\x00" * 16)
    with pytest.raises(FileNotFoundError):
        load_scene(raw, "rawf32")


def test_png_loading_grayscale_and_rgb(tmp_path):
    gray = np.arange(64, dtype=np.uint8).reshape(8, 8)
    Image.fromarray(gray, mode="L").save(tmp_path / "gray.png")
    scene = load_scene(tmp_path / "gray.png", "png")
    assert scene.bands == 1
    np.testing.assert_array_equal(scene.pixels[0], gray.astype(np.float32))
    assert scene.resolution_m_per_px == 1.0  # no sidecar -> default

    rgb = np.random.default_rng(3).integers(0, 255, size=(8, 8, 3), dtype=np.uint8)
    Image.fromarray(rgb, mode="RGB").save(tmp_path / "rgb.png")
    (tmp_path / "rgb.json").write_text(json.dumps({"resolution_m_per_px": 0.31}))
    scene = load_scene(tmp_path / "rgb.png", "png")
    assert scene.bands == 3
    assert scene.resolution_m_per_px == 0.31
    np.testing.assert_array_equal(scene.pixels, rgb.transpose(2, 0, 1).astype(np.float32))


def test_load_scene_unknown_format(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"")
    with pytest.raises(ValueError, match="unsupported scene format"):
        load_scene(tmp_path / "x.bin", "tiff")


def test_render_patch_png_quantization():
    # one 2x2 patch, stretch [0, 10]: value v maps to round(255 * v/10)
    pixels = np.array([[[0.0, 5.0], [10.0, 20.0]]], dtype=np.float32)
    scene = RasterScene(pixels=pixels, resolution_m_per_px=1.0)
    grid = make_grid(scene, 2)
    png = render_patch_png(scene, grid, PatchRef(0, 0), (0, 0, 0), (0.0, 10.0))
    img = np.asarray(Image.open(__import__("io").BytesIO(png)))
    assert img.shape == (2, 2, 3)
    np.testing.assert_array_equal(img[:, :, 0], [[0, 128], [255, 255]])  # 20 clamps to hi
    # grayscale replication: all three channels equal
    np.testing.assert_array_equal(img[:, :, 0], img[:, :, 1])
    np.testing.assert_array_equal(img[:, :, 0], img[:, :, 2])


def test_render_patch_png_is_deterministic(small_scene):
    grid = make_grid(small_scene, 16)
    bands, stretch = default_render_settings(small_scene)
    a = render_patch_png(small_scene, grid, PatchRef(1, 2), bands, stretch)
    b = render_patch_png(small_scene, grid, PatchRef(1, 2), bands, stretch)
    assert a == b
    assert a[:8] == b"\x89PNG\r\n\x1a\n"


def test_render_patch_png_validates_inputs(small_scene):
    grid = make_grid(small_scene, 16)
    with pytest.raises(ValueError):
        render_patch_png(small_scene, grid, PatchRef(0, 0), (0, 1), (0, 1))
    with pytest.raises(ValueError):
        render_patch_png(small_scene, grid, PatchRef(0, 0), (0, 1, 9), (0, 1))
    with pytest.raises(ValueError):
        render_patch_png(small_scene, grid, PatchRef(0, 0), (0, 1, 2), (1.0, 1.0))


def test_default_render_settings_constant_scene():
    scene = RasterScene(pixels=np.full((1, 4, 4), 3.0, dtype=np.float32), resolution_m_per_px=1.0)
    bands, (lo, hi) = default_render_settings(scene)
    assert bands == (0, 0, 0)
    assert lo < hi  # degenerate percentiles widened to a usable window


def test_scene_manifest_round_trip(tmp_path, small_scene):
    save_rawf32(small_scene, tmp_path / "scene.rawf32")
    manifest = {"scene_path": "scene.rawf32", "format": "rawf32", "patch_size_px": 16}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    scene, grid, loaded = load_scene_manifest(tmp_path / "manifest.json")
    assert (grid.rows, grid.cols) == (4, 6)
    assert loaded["format"] == "rawf32"
    np.testing.assert_array_equal(scene.pixels, small_scene.pixels)


def test_scene_manifest_missing_fields(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "png"}))
    with pytest.raises(ValueError, match="missing fields"):
        load_scene_manifest(tmp_path / "manifest.json")
    with pytest.raises(FileNotFoundError):
        load_scene_manifest(tmp_path / "nope.json")

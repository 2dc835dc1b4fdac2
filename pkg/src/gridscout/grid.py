"""Raster scenes and the non-overlapping patch grid laid over them.

A scene is a (bands, height, width) float32 array with a ground resolution.
The grid splits the scene into square patches of ``patch_size_px`` pixels;
trailing partial rows/columns are discarded so every patch is the same size.
Scenes are immutable after load and safe to share across workers.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

SCENE_FORMATS = ("png", "rawf32")


@dataclass(frozen=True)
class RasterScene:
    """Pixel data for one scene, band-major, float32."""

    pixels: np.ndarray  # (bands, height, width)
    resolution_m_per_px: float

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3:
            raise ValueError(f"scene pixels must be (bands, height, width), got shape {self.pixels.shape}")
        if min(self.pixels.shape) < 1:
            raise ValueError(f"scene has an empty dimension: {self.pixels.shape}")
        if self.resolution_m_per_px <= 0:
            raise ValueError("resolution_m_per_px must be positive")

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @property
    def height_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class GridSpec:
    """The H x W patch grid over a scene."""

    rows: int
    cols: int
    patch_size_px: int
    resolution_m_per_px: float

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and one column")
        if self.patch_size_px < 1:
            raise ValueError("patch_size_px must be positive")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def patch_ground_m(self) -> float:
        """Ground side length of one patch, in meters."""
        return self.patch_size_px * self.resolution_m_per_px

    def ref_to_id(self, ref: PatchRef) -> int:
        self.check_ref(ref)
        return ref.row * self.cols + ref.col

    def id_to_ref(self, cell_id: int) -> PatchRef:
        if not 0 <= cell_id < self.n_cells:
            raise ValueError(f"cell id {cell_id} outside grid of {self.n_cells} cells")
        return PatchRef(cell_id // self.cols, cell_id % self.cols)

    def check_ref(self, ref: PatchRef) -> None:
        if not (0 <= ref.row < self.rows and 0 <= ref.col < self.cols):
            raise ValueError(f"patch {ref} outside {self.rows}x{self.cols} grid")

    def iter_refs(self) -> Iterator[PatchRef]:
        for i in range(self.rows):
            for j in range(self.cols):
                yield PatchRef(i, j)


@dataclass(frozen=True, order=True)
class PatchRef:
    """Address of one grid cell; linear id = row * cols + col."""

    row: int
    col: int


def make_grid(scene: RasterScene, patch_size_px: int) -> GridSpec:
    """Define the patch grid for a scene, discarding partial border patches."""
    if patch_size_px < 1:
        raise ValueError("patch_size_px must be positive")
    if patch_size_px > min(scene.width_px, scene.height_px):
        raise ValueError(
            f"patch size {patch_size_px} px exceeds scene extent "
            f"{scene.width_px}x{scene.height_px} px"
        )
    return GridSpec(
        rows=scene.height_px // patch_size_px,
        cols=scene.width_px // patch_size_px,
        patch_size_px=patch_size_px,
        resolution_m_per_px=scene.resolution_m_per_px,
    )


def extract_patch(scene: RasterScene, grid: GridSpec, ref: PatchRef) -> np.ndarray:
    """Return the (bands, p, p) pixel block of one patch."""
    grid.check_ref(ref)
    p = grid.patch_size_px
    r0, c0 = ref.row * p, ref.col * p
    return scene.pixels[:, r0 : r0 + p, c0 : c0 + p]


def extract_all_patches(scene: RasterScene, grid: GridSpec) -> np.ndarray:
    """Stack every patch block in linear id order: (n_cells, bands, p, p).

    Equivalent to extract_patch over iter_refs but without per-patch copies.
    """
    p = grid.patch_size_px
    crop = scene.pixels[:, : grid.rows * p, : grid.cols * p]
    c = scene.bands
    blocks = crop.reshape(c, grid.rows, p, grid.cols, p)
    return np.ascontiguousarray(blocks.transpose(1, 3, 0, 2, 4).reshape(grid.n_cells, c, p, p))


def load_scene(path: str | Path, format: str) -> RasterScene:
    """Load a scene from disk.

    ``png``: 8-bit grayscale or RGB, values kept as [0, 255] floats, with an
    optional JSON sidecar supplying ``resolution_m_per_px`` (default 1.0).
    ``rawf32``: little-endian float32, band-sequential (band, row, col), with a
    required sidecar ``<name>.json`` holding width/height/bands/resolution.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene file not found: {path}")
    if format == "png":
        return _load_png(path)
    if format == "rawf32":
        return _load_rawf32(path)
    raise ValueError(f"unsupported scene format {format!r}; expected one of {SCENE_FORMATS}")


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _load_png(path: Path) -> RasterScene:
    img = Image.open(path)
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float32)[None, :, :]
    elif img.mode == "RGB":
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)
    else:
        raise ValueError(f"PNG mode {img.mode!r} not supported; use 8-bit L or RGB (or rawf32)")
    resolution = 1.0
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        header = json.loads(sidecar.read_text())
        resolution = float(header.get("resolution_m_per_px", 1.0))
    return RasterScene(pixels=arr, resolution_m_per_px=resolution)


def _load_rawf32(path: Path) -> RasterScene:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"rawf32 sidecar header not found: {sidecar}")
    header = json.loads(sidecar.read_text())
    try:
        width = int(header["width"])
        height = int(header["height"])
        bands = int(header["bands"])
        resolution = float(header["resolution_m_per_px"])
    except KeyError as exc:
        raise ValueError(f"rawf32 header {sidecar} missing field {exc}") from exc
    if bands < 1:
        raise ValueError(f"rawf32 header declares {bands} bands; need at least 1")
    payload = np.fromfile(path, dtype="<f4")
    expected = bands * height * width
    if payload.size != expected:
        raise ValueError(
            f"rawf32 payload holds {payload.size} float32 samples but header "
            f"{sidecar.name} declares {bands}x{height}x{width} = {expected}"
        )
    return RasterScene(
        pixels=payload.reshape(bands, height, width).astype(np.float32),
        resolution_m_per_px=resolution,
    )


def save_rawf32(scene: RasterScene, path: str | Path) -> Path:
    """Write a scene as rawf32 payload + JSON sidecar; returns the payload path."""
    path = Path(path)
    scene.pixels.astype("<f4").tofile(path)
    header = {
        "width": scene.width_px,
        "height": scene.height_px,
        "bands": scene.bands,
        "resolution_m_per_px": scene.resolution_m_per_px,
    }
    _sidecar_path(path).write_text(json.dumps(header, indent=2) + "\n")
    return path


def render_patch_png(
    scene: RasterScene,
    grid: GridSpec,
    ref: PatchRef,
    band_mapping: Sequence[int],
    stretch: tuple[float, float],
) -> bytes:
    """Render one patch as an 8-bit RGB PNG.

    ``band_mapping`` picks the three scene bands shown as R, G, B. Values map
    through round(255 * clamp((v - lo) / (hi - lo), 0, 1)) with half-up
    rounding.
    """
    if len(band_mapping) != 3:
        raise ValueError("band_mapping must name exactly 3 bands")
    for b in band_mapping:
        if not 0 <= b < scene.bands:
            raise ValueError(f"band index {b} invalid for scene with {scene.bands} bands")
    lo, hi = stretch
    if not lo < hi:
        raise ValueError(f"stretch requires lo < hi, got ({lo}, {hi})")
    block = extract_patch(scene, grid, ref)
    rgb = block[list(band_mapping), :, :].astype(np.float64)
    scaled = np.clip((rgb - lo) / (hi - lo), 0.0, 1.0) * 255.0
    quantized = np.floor(scaled + 0.5).astype(np.uint8)  # round half up
    img = Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def default_render_settings(scene: RasterScene) -> tuple[tuple[int, int, int], tuple[float, float]]:
    """Band mapping + stretch used when a caller has no preference.

    First three bands (or the single band replicated) stretched across the
    2..98 percentile range of a pixel subsample.
    """
    if scene.bands >= 3:
        bands = (0, 1, 2)
    else:
        bands = (0, 0, 0)
    flat = scene.pixels.reshape(scene.bands, -1)
    step = max(1, flat.shape[1] // 100_000)
    sample = flat[list(dict.fromkeys(bands)), ::step]
    lo = float(np.percentile(sample, 2.0))
    hi = float(np.percentile(sample, 98.0))
    if not lo < hi:
        lo, hi = lo - 0.5, lo + 0.5  # constant scene; any non-degenerate window
    return bands, (lo, hi)


def load_scene_manifest(path: str | Path) -> tuple[RasterScene, GridSpec, dict]:
    """Load a scene manifest {"scene_path", "format", "patch_size_px"}.

    ``scene_path`` is resolved relative to the manifest location when not
    absolute. Returns (scene, grid, manifest dict).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene manifest not found: {path}")
    manifest = json.loads(path.read_text())
    missing = {"scene_path", "format", "patch_size_px"} - manifest.keys()
    if missing:
        raise ValueError(f"scene manifest {path} missing fields: {sorted(missing)}")
    scene_path = Path(manifest["scene_path"])
    if not scene_path.is_absolute():
        scene_path = path.parent / scene_path
    scene = load_scene(scene_path, manifest["format"])
    grid = make_grid(scene, int(manifest["patch_size_px"]))
    return scene, grid, manifest

"""Shared fixtures: tiny scenes and grids reused across the suite."""

import numpy as np
import pytest

from gridscout.grid import GridSpec, RasterScene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_scene():
    """4-band 64x96 px scene with deterministic content."""
    gen = np.random.default_rng(7)
    pixels = gen.normal(100.0, 25.0, size=(4, 64, 96)).astype(np.float32)
    return RasterScene(pixels=pixels, resolution_m_per_px=0.5)


@pytest.fixture
def grid_3x3():
    return GridSpec(rows=3, cols=3, patch_size_px=1, resolution_m_per_px=64.0)


@pytest.fixture
def grid_10x10():
    return GridSpec(rows=10, cols=10, patch_size_px=1, resolution_m_per_px=64.0)

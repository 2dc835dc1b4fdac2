"""The sampling surface: a discrete probability distribution over grid cells.

A surface starts uniform or inverse-cluster-size weighted, hands out cells
one draw at a time without replacement, and (for the online strategies)
shifts mass toward spatial or feature-space neighborhoods of found
positives. Invariants maintained after every operation: probabilities are
non-negative, drawn (exhausted) cells sit at exactly 0, and the remaining
mass sums to 1 while any cell is left.

One labeling session owns its surface; mutation is strictly sequential.
Draws consume a caller-supplied seeded generator (PCG64 via
numpy.random.default_rng), so a session replayed from its seed reproduces
every draw bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import ClusterModel
from .grid import GridSpec, PatchRef

RNG_ALGORITHM = "pcg64"  # numpy default_rng; recorded in session state for replays

STRATEGIES = ("uniform_offline", "cluster_offline", "proximity", "cluster_online")
_SUM_TOL = 1e-9


class SurfaceExhausted(RuntimeError):
    """Raised when a draw is requested but every cell has been sampled."""


class SamplingSurface:
    """Mutable per-cell probabilities over an H x W grid."""

    def __init__(self, grid: GridSpec, probs: np.ndarray, w_init_max: float | None = None):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (grid.n_cells,):
            raise ValueError(f"expected {grid.n_cells} probabilities, got shape {probs.shape}")
        if (probs < 0).any():
            raise ValueError("probabilities must be non-negative")
        total = probs.sum()
        if not np.isclose(total, 1.0, rtol=0, atol=1e-6):
            raise ValueError(f"initial probabilities sum to {total}, expected 1")
        self.grid = grid
        self.probs = probs
        self.exhausted = np.zeros(grid.n_cells, dtype=bool)
        self.w_init_max = float(probs.max()) if w_init_max is None else float(w_init_max)

    @property
    def n_remaining(self) -> int:
        return int((~self.exhausted).sum())

    def draw(self, rng: np.random.Generator) -> PatchRef:
        """Sample one cell proportional to current probability, exhaust it,
        and renormalize the remaining mass."""
        total = self.probs.sum()
        if self.n_remaining == 0 or total <= 0:
            raise SurfaceExhausted("all cells have been sampled")
        cum = np.cumsum(self.probs)
        u = rng.random() * cum[-1]
        idx = int(np.searchsorted(cum, u, side="right"))
        idx = min(idx, self.grid.n_cells - 1)
        while self.exhausted[idx] or self.probs[idx] == 0.0:  # guard fp boundary hits
            idx += 1
            if idx >= self.grid.n_cells:
                idx = int(np.flatnonzero(~self.exhausted & (self.probs > 0))[0])
                break
        self._exhaust(idx)
        return self.grid.id_to_ref(idx)

    def _exhaust(self, idx: int) -> None:
        self.probs[idx] = 0.0
        self.exhausted[idx] = True
        self._renormalize()

    def _renormalize(self) -> None:
        total = self.probs.sum()
        if total > 0:
            self.probs /= total
        else:
            # live cells all at 0 sit outside the support: nothing is drawable
            self.exhausted[:] = True

    def add_weight(self, cell_ids: np.ndarray, w: float) -> None:
        """Add ``w`` to every non-exhausted cell in ``cell_ids``, then renormalize."""
        if w <= 0:
            raise ValueError("reweight increment must be positive")
        if self.n_remaining == 0:
            return
        ids = np.asarray(cell_ids, dtype=np.int64)
        ids = ids[~self.exhausted[ids]]
        self.probs[ids] += w
        self._renormalize()

    def check_invariants(self) -> None:
        assert (self.probs >= 0).all(), "negative probability"
        assert (self.probs[self.exhausted] == 0).all(), "exhausted cell with mass"
        if self.n_remaining:
            assert abs(self.probs.sum() - 1.0) <= _SUM_TOL, "mass not normalized"

    def snapshot(self) -> dict:
        """JSON-ready view: {"h","w","probs","exhausted","w_init_max"}."""
        return {
            "h": self.grid.rows,
            "w": self.grid.cols,
            "probs": self.probs.tolist(),
            "exhausted": np.flatnonzero(self.exhausted).tolist(),
            "w_init_max": self.w_init_max,
        }

    @classmethod
    def from_snapshot(cls, grid: GridSpec, snap: dict) -> SamplingSurface:
        if (snap["h"], snap["w"]) != (grid.rows, grid.cols):
            raise ValueError("snapshot dimensions do not match the grid")
        surface = cls.__new__(cls)
        surface.grid = grid
        surface.probs = np.asarray(snap["probs"], dtype=np.float64)
        surface.exhausted = np.zeros(grid.n_cells, dtype=bool)
        surface.exhausted[np.asarray(snap["exhausted"], dtype=np.int64)] = True
        surface.w_init_max = float(snap["w_init_max"])
        return surface


def init_uniform(grid: GridSpec) -> SamplingSurface:
    """Equal weight on every cell: P = 1 / (H * W)."""
    return SamplingSurface(grid, np.full(grid.n_cells, 1.0 / grid.n_cells))


def init_cluster_weighted(grid: GridSpec, model: ClusterModel) -> SamplingSurface:
    """Inverse-cluster-size weighting: P_i = (1 / K) * (1 / C_i).

    Each cluster carries equal total mass 1/K, so cells of small clusters
    (the rare-object candidates) are sampled far more often per cell.
    """
    if model.n != grid.n_cells:
        raise ValueError(f"cluster model covers {model.n} cells, grid has {grid.n_cells}")
    probs = model.cell_weight() / model.k_eff
    return SamplingSurface(grid, probs)


def cells_within_radius(grid: GridSpec, ref: PatchRef, radius_m: float) -> np.ndarray:
    """Ids of cells whose center lies within ``radius_m`` ground meters of
    ``ref``'s center, excluding ``ref`` itself."""
    grid.check_ref(ref)
    if radius_m <= 0:
        raise ValueError("radius must be positive")
    spacing = grid.patch_ground_m
    reach = int(radius_m // spacing) + 1
    i0, j0 = ref.row, ref.col
    ii = np.arange(max(0, i0 - reach), min(grid.rows, i0 + reach + 1))
    jj = np.arange(max(0, j0 - reach), min(grid.cols, j0 + reach + 1))
    di, dj = np.meshgrid(ii - i0, jj - j0, indexing="ij")
    within = (di * di + dj * dj) * spacing * spacing <= radius_m * radius_m
    within[(di == 0) & (dj == 0)] = False
    rows = (di + i0)[within]
    cols = (dj + j0)[within]
    return rows * grid.cols + cols


@dataclass
class StrategyConfig:
    """Which sampling strategy runs a session, and its reweighting knobs.

    ``weight`` of None means "use the maximum probability of the initial
    surface", frozen at surface construction.
    """

    strategy: str = "uniform_offline"
    radius_m: float = 200.0
    weight: float | None = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "proximity" and self.radius_m <= 0:
            raise ValueError("proximity strategy needs radius_m > 0")
        if self.weight is not None and self.weight <= 0:
            raise ValueError("weight must be positive")

    @property
    def needs_cluster_model(self) -> bool:
        return self.strategy in ("cluster_offline", "cluster_online")

    @property
    def is_online(self) -> bool:
        return self.strategy in ("proximity", "cluster_online")


def apply_proximity_update(
    surface: SamplingSurface, grid: GridSpec, positive_at: PatchRef, cfg: StrategyConfig
) -> None:
    """Boost every live cell within ``cfg.radius_m`` of a found positive."""
    w = surface.w_init_max if cfg.weight is None else cfg.weight
    ids = cells_within_radius(grid, positive_at, cfg.radius_m)
    if ids.size:
        surface.add_weight(ids, w)
    else:
        surface._renormalize()


def apply_online_cluster_update(
    surface: SamplingSurface, model: ClusterModel, positive_at: PatchRef, cfg: StrategyConfig
) -> None:
    """Boost every live cell sharing the found positive's cluster."""
    w = surface.w_init_max if cfg.weight is None else cfg.weight
    cell = surface.grid.ref_to_id(positive_at)
    ids = np.flatnonzero(model.labels == model.labels[cell])
    ids = ids[ids != cell]
    if ids.size:
        surface.add_weight(ids, w)
    else:
        surface._renormalize()


class SamplingStrategy:
    """Bundles surface construction with the positive-triggered update rule.

    The update fires only on positive labels; negatives (and skips) leave
    the surface untouched beyond the exhaustion of the drawn cell.
    """

    def __init__(
        self,
        config: StrategyConfig,
        grid: GridSpec,
        model: ClusterModel | None = None,
    ):
        if config.needs_cluster_model and model is None:
            raise ValueError(f"strategy {config.strategy!r} requires a cluster model")
        if model is not None and model.n != grid.n_cells:
            raise ValueError("cluster model does not cover the grid")
        self.config = config
        self.grid = grid
        self.model = model

    def make_surface(self) -> SamplingSurface:
        if self.config.needs_cluster_model:
            assert self.model is not None
            return init_cluster_weighted(self.grid, self.model)
        return init_uniform(self.grid)

    def on_positive(self, surface: SamplingSurface, ref: PatchRef) -> str | None:
        """Apply the online update for a positive at ``ref``; returns an event
        tag for session logs, or None for offline strategies."""
        if self.config.strategy == "proximity":
            apply_proximity_update(surface, self.grid, ref, self.config)
            return "proximity_boost"
        if self.config.strategy == "cluster_online":
            assert self.model is not None
            apply_online_cluster_update(surface, self.model, ref, self.config)
            return "cluster_boost"
        return None

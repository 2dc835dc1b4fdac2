"""Synthetic rare-object scenes and the budgeted labeling simulation loop.

A synthetic scene plants a small positive class (spatially clumped, feature
mean shifted off one background component) inside a background mixture, so
sampling strategies can be compared against a known ground truth at desk
scale. The session loop draws cells from a sampling surface, labels them
with the ground-truth oracle, and applies online updates on positives; the
experiment driver repeats sessions over trials and budgets and reports the
mean and population std of positives found.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import FeatureMatrix
from .grid import GridSpec, RasterScene
from .surface import RNG_ALGORITHM, SamplingStrategy, SurfaceExhausted


@dataclass
class GroundTruth:
    """Per-cell binary labels: True where the rare object is present."""

    labels: np.ndarray  # (n,) bool

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=bool)

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())


@dataclass
class SyntheticSceneConfig:
    """Knobs for scene generation.

    In the default ``component_shift`` mode the positives form one feature
    class: their mean is a seeded background component's mean plus
    ``positive_shift`` on every dimension. ``background`` mode instead leaves
    positive cells' features exactly as the background process drew them, so
    no feature statistic whatsoever separates the classes; that is the
    adversarial control. ``clump_radius_cells`` = 0 with one clump per
    positive scatters positives spatially uniformly.
    """

    rows: int = 100
    cols: int = 100
    dim: int = 8
    positive_fraction: float = 0.02
    n_background: int = 5
    background_mean_scale: float = 6.0
    background_spread: float = 1.0
    positive_shift: float = 3.0
    positive_spread: float = 1.0
    positive_feature_mode: str = "component_shift"
    n_clumps: int = 10
    clump_radius_cells: float = 3.0
    patch_ground_m: float = 64.0
    render: bool = False
    render_patch_px: int = 8
    render_noise: float = 6.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.positive_fraction < 1:
            raise ValueError("positive_fraction must lie in (0, 1)")
        if self.rows < 1 or self.cols < 1 or self.dim < 1:
            raise ValueError("rows, cols and dim must be positive")
        if self.n_background < 1 or self.n_clumps < 1:
            raise ValueError("need at least one background component and one clump")
        if self.positive_feature_mode not in ("component_shift", "background"):
            raise ValueError("positive_feature_mode must be component_shift or background")
        if self.positive_feature_mode == "background" and (
            self.positive_shift != 0 or self.positive_spread != self.background_spread
        ):
            raise ValueError(
                "background mode ignores the positive class parameters; "
                "set positive_shift=0 and positive_spread=background_spread"
            )
        if self.render and self.dim < 3:
            raise ValueError("rendering paints cells from the first 3 feature dims; need dim >= 3")

    @property
    def n_positive(self) -> int:
        return int(round(self.positive_fraction * self.rows * self.cols))

    @classmethod
    def adversarial_control(cls, **overrides) -> "SyntheticSceneConfig":
        """Control scene: positives carry plain background features and are
        scattered uniformly, so every sampling strategy should reduce to
        chance."""
        cfg = cls(positive_shift=0.0, positive_feature_mode="background", **overrides)
        return replace(cfg, n_clumps=cfg.n_positive, clump_radius_cells=0.0)


@dataclass
class SyntheticScene:
    config: SyntheticSceneConfig
    grid: GridSpec
    features: FeatureMatrix
    truth: GroundTruth
    components: np.ndarray  # background component per cell (positives carry theirs)
    positive_component: int
    scene: RasterScene | None = None


def _place_positives(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.rows * cfg.cols
    n_pos = cfg.n_positive
    if n_pos < 1:
        raise ValueError("positive_fraction rounds to zero positives for this grid")
    n_clumps = min(cfg.n_clumps, n_pos)
    centers = rng.choice(n, size=n_clumps, replace=False)
    taken = np.zeros(n, dtype=bool)
    radius = cfg.clump_radius_cells
    r_int = int(np.floor(radius))
    chosen = []
    for k in range(n_pos):
        ci, cj = divmod(int(centers[k % n_clumps]), cfg.cols)
        cell = -1
        for _ in range(200):
            if r_int == 0:
                di = dj = 0
            else:
                di = int(rng.integers(-r_int, r_int + 1))
                dj = int(rng.integers(-r_int, r_int + 1))
                if di * di + dj * dj > radius * radius:
                    continue
            i, j = ci + di, cj + dj
            if 0 <= i < cfg.rows and 0 <= j < cfg.cols and not taken[i * cfg.cols + j]:
                cell = i * cfg.cols + j
                break
        if cell < 0:
            # clump neighborhood saturated: nearest free cell to the center
            free = np.flatnonzero(~taken)
            fi, fj = free // cfg.cols, free % cfg.cols
            cell = int(free[np.argmin((fi - ci) ** 2 + (fj - cj) ** 2)])
        taken[cell] = True
        chosen.append(cell)
    assert len(chosen) == n_pos
    return np.array(sorted(chosen), dtype=np.int64)


def generate_synthetic(cfg: SyntheticSceneConfig) -> SyntheticScene:
    """Build features, ground truth, and (optionally) a paintable raster.

    Placement, features, and rendering consume independent seeded streams,
    so moving the positives around never perturbs the feature draw (the
    adversarial control depends on that separation).
    """
    rng_place = np.random.default_rng(stable_seed(cfg.seed, "placement"))
    rng_feat = np.random.default_rng(stable_seed(cfg.seed, "features"))
    n = cfg.rows * cfg.cols
    positives = _place_positives(cfg, rng_place)

    comp_means = rng_feat.standard_normal((cfg.n_background, cfg.dim)) * cfg.background_mean_scale
    components = rng_feat.integers(0, cfg.n_background, size=n)
    positive_component = int(rng_feat.integers(cfg.n_background))
    values = comp_means[components] + rng_feat.standard_normal((n, cfg.dim)) * cfg.background_spread
    if cfg.positive_feature_mode == "component_shift":
        components[positives] = positive_component
        values[positives] = (
            comp_means[positive_component]
            + cfg.positive_shift
            + rng_feat.standard_normal((positives.size, cfg.dim)) * cfg.positive_spread
        )

    truth = np.zeros(n, dtype=bool)
    truth[positives] = True

    grid = GridSpec(
        rows=cfg.rows,
        cols=cfg.cols,
        patch_size_px=cfg.render_patch_px,
        resolution_m_per_px=cfg.patch_ground_m / cfg.render_patch_px,
    )
    render_rng = np.random.default_rng(stable_seed(cfg.seed, "render"))
    scene = _render_scene(cfg, grid, values, render_rng) if cfg.render else None
    return SyntheticScene(
        config=cfg,
        grid=grid,
        features=FeatureMatrix(values.astype(np.float32), provenance="external"),
        truth=GroundTruth(truth),
        components=components,
        positive_component=positive_component,
        scene=scene,
    )


def _render_scene(
    cfg: SyntheticSceneConfig, grid: GridSpec, values: np.ndarray, rng: np.random.Generator
) -> RasterScene:
    """Paint each cell a color taken from its first three feature dims."""
    first3 = values[:, :3]
    lo, hi = first3.min(), first3.max()
    span = hi - lo if hi > lo else 1.0
    colors = 20.0 + (first3 - lo) / span * 215.0  # (n, 3) base DN per cell
    pp = cfg.render_patch_px
    cell_grid = colors.reshape(cfg.rows, cfg.cols, 3).transpose(2, 0, 1)
    pixels = np.repeat(np.repeat(cell_grid, pp, axis=1), pp, axis=2)
    pixels = pixels + rng.standard_normal(pixels.shape) * cfg.render_noise
    return RasterScene(
        pixels=pixels.astype(np.float32),
        resolution_m_per_px=grid.resolution_m_per_px,
    )


def export_truth(truth: GroundTruth, grid: GridSpec, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "label"])
        for cell in range(grid.n_cells):
            writer.writerow([cell // grid.cols, cell % grid.cols, int(truth.labels[cell])])
    return path


def import_truth(path: str | Path, grid: GridSpec) -> GroundTruth:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ground-truth file not found: {path}")
    labels = np.zeros(grid.n_cells, dtype=bool)
    seen = np.zeros(grid.n_cells, dtype=bool)
    with path.open() as fh:
        reader = csv.DictReader(fh)
        for line in reader:
            cell = int(line["row"]) * grid.cols + int(line["col"])
            labels[cell] = bool(int(line["label"]))
            seen[cell] = True
    if not seen.all():
        raise ValueError(f"ground truth at {path} does not cover every grid cell")
    return GroundTruth(labels)


@dataclass
class StepRecord:
    step: int
    row: int
    col: int
    label: int
    event: str | None = None


@dataclass
class SessionResult:
    """Outcome of one budgeted labeling simulation."""

    strategy_name: str
    budget: int
    seed: int
    n_pos: int
    n_neg: int
    steps: list[StepRecord]
    positives_curve: np.ndarray  # cumulative positives after steps 1..len(steps)
    rng_algorithm: str = RNG_ALGORITHM

    def samples_to_positives(self, m: int, cap: int) -> int:
        """Steps needed to see m positives; ``cap`` when never reached."""
        hits = np.flatnonzero(self.positives_curve >= m)
        return int(hits[0]) + 1 if hits.size else cap


def run_session(
    strategy: SamplingStrategy,
    truth: GroundTruth,
    budget: int,
    seed: int,
    stop_at_positives: int | None = None,
) -> SessionResult:
    """Draw up to ``budget`` cells, labeling each against the ground truth.

    Positives trigger the strategy's surface update; the loop ends early if
    the surface runs out of cells or ``stop_at_positives`` is reached.
    Bit-reproducible for a given seed.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    surface = strategy.make_surface()
    rng = np.random.default_rng(seed)
    steps: list[StepRecord] = []
    curve = np.zeros(budget, dtype=np.int64)
    n_pos = 0
    for step in range(1, budget + 1):
        try:
            ref = surface.draw(rng)
        except SurfaceExhausted:
            curve = curve[: step - 1]
            break
        label = int(truth.labels[strategy.grid.ref_to_id(ref)])
        event = None
        if label:
            n_pos += 1
            event = strategy.on_positive(surface, ref)
        steps.append(StepRecord(step, ref.row, ref.col, label, event))
        curve[step - 1] = n_pos
        if stop_at_positives is not None and n_pos >= stop_at_positives:
            curve = curve[:step]
            break
    return SessionResult(
        strategy_name=strategy.config.strategy,
        budget=budget,
        seed=seed,
        n_pos=n_pos,
        n_neg=len(steps) - n_pos,
        steps=steps,
        positives_curve=curve,
    )


def samples_to_positives(
    strategy: SamplingStrategy, truth: GroundTruth, m: int, seed: int
) -> int:
    """Draws needed for an offline/online session to uncover m positives,
    capped at the grid size when the scene is exhausted first."""
    n = strategy.grid.n_cells
    if m > truth.n_positive:
        raise ValueError(f"scene holds {truth.n_positive} positives; cannot ask for {m}")
    result = run_session(strategy, truth, budget=n, seed=seed, stop_at_positives=m)
    return result.samples_to_positives(m, cap=n)


def export_session_log(result: SessionResult, path: str | Path) -> Path:
    """Session log CSV: step,row,col,label,strategy_event."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "row", "col", "label", "strategy_event"])
        for rec in result.steps:
            writer.writerow([rec.step, rec.row, rec.col, rec.label, rec.event or ""])
    return path


def stable_seed(base_seed: int, *parts) -> int:
    """Deterministic 63-bit seed derived from a base seed and labels."""
    tag = ":".join([str(base_seed), *map(str, parts)])
    digest = hashlib.sha256(tag.encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class ExperimentRow:
    strategy: str
    budget: int
    n_pos_mean: float
    n_pos_std: float  # population std over trials
    trials: int
    values: list[int] = field(default_factory=list)


@dataclass
class ExperimentReport:
    rows: list[ExperimentRow]
    config_echo: dict = field(default_factory=dict)

    def row(self, strategy: str, budget: int) -> ExperimentRow:
        for r in self.rows:
            if r.strategy == strategy and r.budget == budget:
                return r
        raise KeyError((strategy, budget))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["strategy", "budget", "n_pos_mean", "n_pos_std", "trials"])
            for r in self.rows:
                writer.writerow([r.strategy, r.budget, f"{r.n_pos_mean:.6g}", f"{r.n_pos_std:.6g}", r.trials])
        return path

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "config": self.config_echo,
            "rows": [asdict(r) for r in self.rows],
        }
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path


def run_experiment(
    strategies: dict[str, SamplingStrategy],
    budgets: list[int],
    trials: int,
    truth: GroundTruth,
    base_seed: int = 0,
    config_echo: dict | None = None,
    keep_sessions: bool = False,
) -> ExperimentReport | tuple[ExperimentReport, dict[tuple[str, int], SessionResult]]:
    """Run ``trials`` seeded sessions per strategy and tabulate positives found.

    One session per (strategy, trial) at the largest budget covers every
    smaller budget: the draw sequence through step b does not depend on the
    budget, so n+ at budget b is the cumulative-positives curve at step b.
    Trial seeds derive from hash(base_seed, strategy, trial).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not budgets:
        raise ValueError("need at least one budget")
    budgets = sorted(budgets)
    b_max = budgets[-1]
    rows: list[ExperimentRow] = []
    sessions: dict[tuple[str, int], SessionResult] = {}
    for name, strategy in strategies.items():
        counts = {b: [] for b in budgets}
        for trial in range(trials):
            seed = stable_seed(base_seed, name, trial)
            result = run_session(strategy, truth, budget=b_max, seed=seed)
            if keep_sessions:
                sessions[(name, trial)] = result
            curve = result.positives_curve
            for b in budgets:
                counts[b].append(int(curve[min(b, len(curve)) - 1]) if len(curve) else 0)
        for b in budgets:
            vals = np.array(counts[b], dtype=np.float64)
            rows.append(
                ExperimentRow(
                    strategy=name,
                    budget=b,
                    n_pos_mean=float(vals.mean()),
                    n_pos_std=float(vals.std()),
                    trials=trials,
                    values=[int(v) for v in counts[b]],
                )
            )
    report = ExperimentReport(rows=rows, config_echo=config_echo or {})
    return (report, sessions) if keep_sessions else report

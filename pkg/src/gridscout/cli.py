"""Single command-line entry point for the whole pipeline.

Every subcommand reads its parameters from one TOML or JSON config document
(section per subcommand), layered under the global --seed/--out flags.
Unknown keys anywhere in the document are rejected, and the fully-resolved
configuration is echoed into the output directory, so a run can always be
reproduced from its artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cluster import ClusteringConfig, fit_cluster_model, import_assignments, silhouette
from .cluster import export_assignments
from .features import (
    RcfConfig,
    build_featurizer,
    export_features,
    featurize_scene,
    import_features,
    standardize,
)
from .grid import GridSpec, load_scene, load_scene_manifest, make_grid, save_rawf32
from .hyperopt import SearchSpace, export_trials, sweep_correlation, tune
from .rce import RceBatch, rce_gradient, rce_loss
from .simulate import (
    SyntheticSceneConfig,
    export_session_log,
    export_truth,
    generate_synthetic,
    import_truth,
    run_experiment,
)
from .surface import STRATEGIES, SamplingStrategy, StrategyConfig

_SYNTH_DEFAULTS = {k: v for k, v in asdict(SyntheticSceneConfig()).items() if k != "seed"}

SCHEMAS: dict[str, dict] = {
    "synth": dict(_SYNTH_DEFAULTS),
    "gridify": {"scene_path": "", "format": "png", "patch_size_px": 128},
    "featurize": {
        "manifest": "",
        "method": "rcf",
        "num_filters": 256,
        "filter_size": 3,
        "bias": 0.0,
        "standardize": False,
        "workers": 0,
    },
    "cluster": {
        "features": "",
        "rows": 0,  # 0: infer the grid shape from the CSV
        "cols": 0,
        "algorithm": "kmeans",
        "n_clusters": 8,
        "eps": 0.5,
        "min_neighbors": 5,
        "max_iter": 300,
        "tol": 1e-4,
        "report_silhouette": True,
        "sample_cap": 5000,
    },
    "tune": {
        "features": "",
        "feature_sets": {},  # name -> csv path; alternative to `features`
        "algorithms": ["kmeans", "bisecting_kmeans", "dbscan"],
        "k_min": 2,
        "k_max": 16,
        "eps_min": 0.0,  # 0: derive the range from pairwise distances
        "eps_max": 0.0,
        "eta_min": 2,
        "eta_max": 10,
        "trials": 20,
        "sample_cap": 5000,
    },
    "sweep": {
        "features": "",
        "feature_sets": {},
        "truth": "",
        "algorithms": ["kmeans"],
        "k_min": 2,
        "k_max": 16,
        "eps_min": 0.0,
        "eps_max": 0.0,
        "eta_min": 2,
        "eta_max": 10,
        "trials": 15,
        "sample_cap": 5000,
        "m": 100,
        "n_seeds": 3,
        "patch_ground_m": 64.0,
    },
    "experiment": {
        "features": "",  # empty: generate the synthetic scene below
        "truth": "",
        "assignments": "",  # empty: fit the cluster model from the features
        "rows": 0,
        "cols": 0,
        "synth": {},  # overrides for the generated scene, same keys as [synth]
        "strategies": list(STRATEGIES),
        "budgets": [300, 950, 3000],
        "trials": 10,
        "algorithm": "kmeans",
        "n_clusters": 8,
        "eps": 0.5,
        "min_neighbors": 5,
        "radius_m": 200.0,
        "weight": 0.0,  # 0: use the surface's frozen max initial probability
        "patch_ground_m": 64.0,
        "keep_sessions": True,
    },
    "serve": {"data_root": "", "host": "127.0.0.1", "port": 8765, "ui": ""},
    "rce_demo": {"n": 64, "classes": 3, "labeled_fraction": 0.5, "fd_step": 1e-6, "fd_checks": 8},
}


def _load_doc(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with p.open("rb") as fh:
            return tomllib.load(fh)
    if p.suffix == ".json":
        return json.loads(p.read_text())
    raise ValueError(f"config must be .toml or .json, got {p.suffix!r}")


def _coerce(value, default, key: str, where: str):
    label = f"{where}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{label} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ValueError(f"{label} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{label} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{label} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ValueError(f"{label} must be a list")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ValueError(f"{label} must be a table")
        return dict(value)
    return value


def _resolve_section(doc: dict, name: str, schema: dict) -> dict:
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise ValueError(f"config section [{name}] must be a table")
    unknown = sorted(section.keys() - schema.keys())
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    resolved = {}
    for key, default in schema.items():
        resolved[key] = _coerce(section[key], default, key, name) if key in section else default
    return resolved


class RunContext:
    """Resolved seed, output directory, and config for one subcommand run."""

    def __init__(self, args: argparse.Namespace, name: str):
        doc = _load_doc(args.config)
        allowed = set(SCHEMAS) | {"seed", "out"}
        unknown = sorted(doc.keys() - allowed)
        if unknown:
            raise ValueError(f"unknown top-level config keys: {', '.join(unknown)}")
        self.name = name
        self.cfg = _resolve_section(doc, name, SCHEMAS[name])
        seed = args.seed if args.seed is not None else doc.get("seed", 0)
        self.seed = _coerce(seed, 0, "seed", "global")
        out = args.out if args.out is not None else doc.get("out", f"out_{name}")
        self.out = Path(_coerce(out, "", "out", "global"))
        self.out.mkdir(parents=True, exist_ok=True)

    def echo(self) -> Path:
        doc = {"subcommand": self.name, "seed": self.seed, "out": str(self.out), "config": self.cfg}
        path = self.out / "config.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _infer_grid(csv_path: str | Path, rows: int, cols: int, patch_ground_m: float = 1.0) -> GridSpec:
    """Grid shape from explicit dims, else from the CSV's row/col extent."""
    if rows < 1 or cols < 1:
        import pandas as pd

        frame = pd.read_csv(csv_path, usecols=["row", "col"])
        rows = int(frame["row"].max()) + 1
        cols = int(frame["col"].max()) + 1
    return GridSpec(rows=rows, cols=cols, patch_size_px=1, resolution_m_per_px=patch_ground_m)


def cmd_synth(args: argparse.Namespace) -> int:
    ctx = RunContext(args, "synth")
    cfg = SyntheticSceneConfig(**ctx.cfg, seed=ctx.seed)
    scene = generate_synthetic(cfg)
    export_features(scene.features, scene.grid, ctx.out / "features.csv")
    export_truth(scene.truth, scene.grid, ctx.out / "truth.csv")
    if scene.scene is not None:
        save_rawf32(scene.scene, ctx.out / "scene.rawf32")
        manifest = {
            "scene_path": "scene.rawf32",
            "format": "rawf32",
            "patch_size_px": cfg.render_patch_px,
        }
        (ctx.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ctx.echo()
    print(
        f"synthetic scene: {cfg.rows}x{cfg.cols} cells, "
        f"{scene.truth.n_positive} positives -> {ctx.out}"
    )
    return 0


def cmd_gridify(args: argparse.Namespace) -> int:
    ctx = RunContext(args, "gridify")
    cfg = ctx.cfg
    if not cfg["scene_path"]:
        raise ValueError("gridify needs scene_path=<raster file> in [gridify]")
    scene_path = Path(cfg["scene_path"]).resolve()
    scene = load_scene(scene_path, cfg["format"])
    grid = make_grid(scene, cfg["patch_size_px"])
    manifest = {
        "scene_path": str(scene_path),
        "format": cfg["format"],
        "patch_size_px": cfg["patch_size_px"],
    }
    (ctx.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ctx.echo()
    print(f"grid: {grid.rows}x{grid.cols} patches of {grid.patch_size_px} px -> {ctx.out}")
    return 0


def cmd_featurize(args: argparse.Namespace) -> int:
    ctx = RunContext(args, "featurize")
    cfg = ctx.cfg
    if not cfg["manifest"]:
        raise ValueError("featurize needs manifest=<scene manifest> in [featurize]")
    scene, grid, _ = load_scene_manifest(cfg["manifest"])
    rcf = RcfConfig(
        num_filters=cfg["num_filters"],
        filter_size=cfg["filter_size"],
        bias=cfg["bias"],
        seed=ctx.seed,
    )
    featurizer = build_featurizer(cfg["method"], rcf)
    features = featurize_scene(scene, grid, featurizer, n_workers=cfg["workers"] or None)
    if cfg["standardize"]:
        features = standardize(features)
    export_features(features, grid, ctx.out / "features.csv")
    ctx.echo()
    print(f"features: {features.n} cells x {features.dim} dims -> {ctx.out / 'features.csv'}")
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    ctx = RunContext(args, "cluster")
    cfg = ctx.cfg
    if not cfg["features"]:
        raise ValueError("cluster needs features=<csv> in [cluster]")
    grid = _infer_grid(cfg["features"], cfg["rows"], cfg["cols"])
    features = import_features(cfg["features"], grid)
    ccfg = ClusteringConfig(
        algorithm=cfg["algorithm"],
        n_clusters=cfg["n_clusters"],
        eps=cfg["eps"],
        min_neighbors=cfg["min_neighbors"],
        seed=ctx.seed,
        max_iter=cfg["max_iter"],
        tol=cfg["tol"],
    )
    model = fit_cluster_model(features.values, ccfg)
    export_assignments(model, grid, ctx.out / "assignments.csv")
    metrics: dict = {"k_eff": model.k_eff, "silhouette_mean": None}
    if cfg["report_silhouette"] and model.k_eff >= 2:
        metrics["silhouette_mean"] = silhouette(
            features.values, model, sample_cap=cfg["sample_cap"], seed=ctx.seed
        ).mean_score
    (ctx.out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    ctx.echo()
    print(f"clusters: k_eff={model.k_eff} -> {ctx.out / 'assignments.csv'}")
    return 0


def _load_feature_sets(cfg: dict, name: str) -> tuple[dict, GridSpec]:
    paths: dict[str, str] = {}
    if cfg["features"]:
        paths[Path(cfg["features"]).stem] = cfg["features"]
    paths.update(cfg["feature_sets"])
    if not paths:
        raise ValueError(f"{name} needs features=<csv> or a [{name}.feature_sets] table")
    grid = _infer_grid(next(iter(paths.values())), 0, 0, cfg.get("patch_ground_m", 1.0))
    sets = {key: import_features(path, grid) for key, path in sorted(paths.items())}
    return sets, grid


def _build_space(cfg: dict, feature_choices: tuple[str, ...], seed: int) -> SearchSpace:
    eps_range = None
    if cfg["eps_min"] > 0:
        eps_range = (cfg["eps_min"], cfg["eps_max"] if cfg["eps_max"] > 0 else cfg["eps_min"])
    return SearchSpace(
        feature_choices=feature_choices,
        algorithms=tuple(cfg["algorithms"]),
        k_range=(cfg["k_min"], cfg["k_max"]),
        eps_range=eps_range,
        eta_range=(cfg["eta_min"], cfg["eta_max"]),
        trials=cfg["trials"],
        seed=seed,
    )


def cmd_tune(args: argparse.Namespace) -> int:
    ctx = RunContext(args, "tune")
    sets, _ = _load_feature_sets(ctx.cfg, "tune")
    space = _build_space(ctx.cfg, tuple(sets), ctx.seed)
    best, log = tune(sets, space, sample_cap=ctx.cfg["sample_cap"])
    export_trials(log, ctx.out / "trials.csv")
    summary = {
        "feature": best.feature,
        "algorithm": best.config.algorithm,
        "n_clusters": best.config.n_clusters,
        "eps": best.config.eps,
        "min_neighbors": best.config.min_neighbors,
        "k_eff": best.k_eff,
        "silhouette_mean": None if np.isnan(best.silhouette) else best.silhouette,
        "objective": best.objective,
        "trials": len(log),
    }
    (ctx.out / "best.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    ctx.echo()
    print(
        f"tuned: {best.feature}/{best.config.algorithm} objective={best.objective:.4f} "
        f"-> {ctx.out / 'best.json'}"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    ctx = RunContext(args, "sweep")
    cfg = ctx.cfg
    if not cfg["truth"]:
        raise ValueError("sweep needs truth=<csv> in [sweep]")
    sets, grid = _load_feature_sets(cfg, "sweep")
    truth = import_truth(cfg["truth"], grid)
    space = _build_space(cfg, tuple(sets), ctx.seed)
    result = sweep_correlation(
        sets, truth, grid, space, m=cfg["m"], n_seeds=cfg["n_seeds"], sample_cap=cfg["sample_cap"]
    )
    export_trials(result.records, ctx.out / "sweep_trials.csv")
    with (ctx.out / "plot_objective_vs_cost.csv").open("w") as fh:
        fh.write("trial,objective,cost_samples\n")
        for r in result.records:
            fh.write(f"{r.index},{r.objective:.6g},{r.cost_samples:.6g}\n")
    summary = {
        "spearman": result.spearman,
        "m_positives": result.m_positives,
        "n_seeds": result.n_seeds,
        "trials": len(result.records),
    }
    (ctx.out / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    ctx.echo()
    rho = "n/a" if result.spearman is None else f"{result.spearman:.3f}"
    print(f"sweep: spearman(|silhouette|, cost)={rho} -> {ctx.out}")
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    ctx = RunContext(args, "experiment")
    cfg = ctx.cfg

    if cfg["features"]:
        if not cfg["truth"]:
            raise ValueError("experiment with explicit features also needs truth=<csv>")
        grid = _infer_grid(cfg["features"], cfg["rows"], cfg["cols"], cfg["patch_ground_m"])
        features = import_features(cfg["features"], grid)
        truth = import_truth(cfg["truth"], grid)
    else:
        synth_cfg = _resolve_section({"synth": cfg["synth"]}, "synth", SCHEMAS["synth"])
        scene = generate_synthetic(SyntheticSceneConfig(**synth_cfg, seed=ctx.seed))
        grid, features, truth = scene.grid, scene.features, scene.truth

    need_model = any(StrategyConfig(strategy=s).needs_cluster_model for s in cfg["strategies"])
    model = None
    if need_model:
        if cfg["assignments"]:
            model = import_assignments(cfg["assignments"], grid)
        else:
            ccfg = ClusteringConfig(
                algorithm=cfg["algorithm"],
                n_clusters=cfg["n_clusters"],
                eps=cfg["eps"],
                min_neighbors=cfg["min_neighbors"],
                seed=ctx.seed,
            )
            model = fit_cluster_model(features.values, ccfg)

    weight = cfg["weight"] if cfg["weight"] > 0 else None
    strategies = {}
    for name in cfg["strategies"]:
        scfg = StrategyConfig(strategy=name, radius_m=cfg["radius_m"], weight=weight)
        strategies[name] = SamplingStrategy(scfg, grid, model if scfg.needs_cluster_model else None)

    budgets = [int(b) for b in cfg["budgets"]]
    report, sessions = run_experiment(
        strategies,
        budgets,
        trials=cfg["trials"],
        truth=truth,
        base_seed=ctx.seed,
        config_echo={"subcommand": "experiment", "seed": ctx.seed, "config": cfg},
        keep_sessions=True,
    )
    report.to_csv(ctx.out / "report.csv")
    report.to_json(ctx.out / "report.json")
    with (ctx.out / "plot_npos_vs_budget.csv").open("w") as fh:
        fh.write("strategy,budget,trial,n_pos\n")
        for row in report.rows:
            for trial, value in enumerate(row.values):
                fh.write(f"{row.strategy},{row.budget},{trial},{value}\n")
    if cfg["keep_sessions"]:
        session_dir = ctx.out / "sessions"
        session_dir.mkdir(exist_ok=True)
        for (name, trial), result in sessions.items():
            export_session_log(result, session_dir / f"{name}_trial{trial}.csv")
    ctx.echo()
    print(f"experiment: {len(report.rows)} strategy/budget rows -> {ctx.out / 'report.csv'}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    ctx = RunContext(args, "serve")
    cfg = ctx.cfg
    port = args.port if args.port is not None else cfg["port"]
    ctx.echo()
    from .service import create_app

    app = create_app(cfg["data_root"] or None, cfg["ui"] or None)
    import uvicorn

    print(f"serving on http://{cfg['host']}:{port}")
    uvicorn.run(app, host=cfg["host"], port=port, log_level="warning")
    return 0


def cmd_rce_demo(args: argparse.Namespace) -> int:
    ctx = RunContext(args, "rce_demo")
    cfg = ctx.cfg
    rng = np.random.default_rng(ctx.seed)
    logits = rng.normal(size=(cfg["n"], cfg["classes"]))
    labeled = rng.random(cfg["n"]) < cfg["labeled_fraction"]
    targets = rng.integers(0, cfg["classes"], size=cfg["n"])
    batch = RceBatch(logits, targets, labeled)
    value = rce_loss(batch)
    grad = rce_gradient(batch)

    h = cfg["fd_step"]
    max_err = 0.0
    flat = rng.choice(logits.size, size=min(cfg["fd_checks"], logits.size), replace=False)
    for idx in flat:
        i, k = divmod(int(idx), cfg["classes"])
        bumped = logits.copy()
        bumped[i, k] += h
        up = rce_loss(RceBatch(bumped, targets, labeled)).total
        bumped[i, k] -= 2 * h
        down = rce_loss(RceBatch(bumped, targets, labeled)).total
        max_err = max(max_err, abs((up - down) / (2 * h) - grad[i, k]))

    doc = {
        "total": value.total,
        "ce_term": value.ce_term,
        "entropy_term": value.entropy_term,
        "rho": value.rho,
        "max_gradient_abs_err": max_err,
    }
    (ctx.out / "rce.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    ctx.echo()
    print(
        f"loss={value.total:.6f} (ce={value.ce_term:.6f}, entropy={value.entropy_term:.6f}, "
        f"rho={value.rho:.3f}), max fd gradient error {max_err:.2e}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config document")
    common.add_argument("--seed", type=int, default=None, help="base RNG seed (overrides config)")
    common.add_argument("--out", default=None, help="output directory (overrides config)")

    parser = argparse.ArgumentParser(prog="gridscout", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic labeled scene").set_defaults(func=cmd_synth)
    sub.add_parser("gridify", parents=[common], help="wrap a raster in a patch-grid manifest").set_defaults(func=cmd_gridify)
    sub.add_parser("featurize", parents=[common], help="compute per-patch features").set_defaults(func=cmd_featurize)
    sub.add_parser("cluster", parents=[common], help="cluster a feature CSV").set_defaults(func=cmd_cluster)
    sub.add_parser("tune", parents=[common], help="search clustering configs by |silhouette|").set_defaults(func=cmd_tune)
    sub.add_parser("sweep", parents=[common], help="correlate |silhouette| with sampling cost").set_defaults(func=cmd_sweep)
    sub.add_parser("experiment", parents=[common], help="compare sampling strategies over budgets").set_defaults(func=cmd_experiment)
    serve = sub.add_parser("serve", parents=[common], help="run the annotation service")
    serve.add_argument("--port", type=int, default=None, help="listen port (overrides config)")
    serve.set_defaults(func=cmd_serve)
    sub.add_parser("rce-demo", parents=[common], help="evaluate the blended loss on a random batch").set_defaults(func=cmd_rce_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one line on stderr, nonzero exit; no traceback noise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""HTTP annotation service for budgeted human-in-the-loop sessions.

A session walks the draw/label loop over a prepared scene: the server owns
the sampling surface and the RNG, the client only sees one pending patch at
a time and posts a label for it. Every mutation appends to a per-session
JSON-lines event log before the response goes out; replaying that log from
the recorded seed rebuilds the surface, tallies, and step log bit-exactly,
which is both the crash-recovery story and the correctness oracle.

Per-session mutations are serialized by a lock. If two clients submit the
same pending patch at once, the lock admits one; the other finds no pending
patch and gets a conflict response.
"""

from __future__ import annotations

import json
import os
import re
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster import import_assignments
from .grid import (
    GridSpec,
    PatchRef,
    RasterScene,
    default_render_settings,
    load_scene_manifest,
    render_patch_png,
)
from .surface import RNG_ALGORITHM, SamplingStrategy, StrategyConfig, SurfaceExhausted

DATA_ROOT_ENV = "GRIDSCOUT_DATA"
LABELS = ("positive", "negative", "skip")
SNAPSHOT_EVERY = 25  # labels between surface snapshots

_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class SessionError(Exception):
    """Base for session-protocol violations; carries a stable error code."""

    code = "session_error"


class BudgetExhausted(SessionError):
    code = "budget_exhausted"


class NoPendingPatch(SessionError):
    code = "no_pending_patch"


class PatchMismatch(SessionError):
    code = "patch_mismatch"


class ReplayMismatch(SessionError):
    code = "replay_mismatch"


@dataclass
class SceneBundle:
    """A loaded scene plus everything needed to serve and tile it."""

    name: str
    scene: RasterScene
    grid: GridSpec
    manifest: dict
    band_mapping: tuple[int, int, int]
    stretch: tuple[float, float]


class AnnotationSession:
    """The draw/label state machine, independent of HTTP and persistence.

    At most one patch is pending at a time; a draw commits the cell against
    the without-replacement surface before the labeler sees it, so abandoning
    a patch cannot resurrect it. Skips consume budget but never reweight.
    """

    def __init__(self, strategy: SamplingStrategy, budget: int, seed: int):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.strategy = strategy
        self.budget = budget
        self.seed = seed
        self.surface = strategy.make_surface()
        self.rng = np.random.default_rng(seed)
        self.pending: PatchRef | None = None
        self.pending_step = 0
        self.steps: list[dict] = []
        self.n_positive = 0
        self.n_negative = 0
        self.n_skip = 0

    @property
    def labels_done(self) -> int:
        return len(self.steps)

    @property
    def done(self) -> bool:
        return self.labels_done >= self.budget

    def next_patch(self) -> tuple[PatchRef, int]:
        """Return the pending patch, drawing one first if none is pending."""
        if self.pending is not None:
            return self.pending, self.pending_step
        if self.done:
            raise BudgetExhausted(f"all {self.budget} label slots are used")
        self.pending = self.surface.draw(self.rng)
        self.pending_step = self.labels_done + 1
        return self.pending, self.pending_step

    def submit(self, ref: PatchRef, label: str) -> dict:
        """Record a label for the pending patch; positives reweight the surface."""
        if label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")
        if self.pending is None:
            raise NoPendingPatch("no patch is awaiting a label")
        if ref != self.pending:
            raise PatchMismatch(
                f"pending patch is ({self.pending.row},{self.pending.col}), "
                f"got ({ref.row},{ref.col})"
            )
        event = None
        if label == "positive":
            self.n_positive += 1
            event = self.strategy.on_positive(self.surface, ref)
        elif label == "negative":
            self.n_negative += 1
        else:
            self.n_skip += 1
        record = {
            "step": self.pending_step,
            "row": ref.row,
            "col": ref.col,
            "label": label,
            "surface_event": event,
        }
        self.steps.append(record)
        self.pending = None
        return record

    def tallies(self) -> dict:
        return {
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "n_skip": self.n_skip,
            "labels_done": self.labels_done,
            "budget": self.budget,
            "budget_remaining": self.budget - self.labels_done,
            "done": self.done,
        }


@dataclass
class SessionConfig:
    """Creation-time parameters, echoed verbatim into the event log."""

    scene: str
    strategy: StrategyConfig
    budget: int
    seed: int
    assignments: str | None = None

    def to_json(self) -> dict:
        return {
            "scene": self.scene,
            "strategy": {
                "strategy": self.strategy.strategy,
                "radius_m": self.strategy.radius_m,
                "weight": self.strategy.weight,
            },
            "budget": self.budget,
            "seed": self.seed,
            "assignments": self.assignments,
            "rng_algorithm": RNG_ALGORITHM,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SessionConfig":
        strat = doc["strategy"]
        return cls(
            scene=doc["scene"],
            strategy=StrategyConfig(
                strategy=strat["strategy"],
                radius_m=strat.get("radius_m", 200.0),
                weight=strat.get("weight"),
            ),
            budget=doc["budget"],
            seed=doc["seed"],
            assignments=doc.get("assignments"),
        )


class SessionStore:
    """Owns scenes, live sessions, and their on-disk event logs."""

    def __init__(self, data_root: str | Path):
        self.data_root = Path(data_root)
        self._scenes: dict[str, SceneBundle] = {}
        self._sessions: dict[str, "LiveSession"] = {}
        self._lock = threading.Lock()

    # scenes ---------------------------------------------------------------

    def scene_dir(self, name: str) -> Path:
        if not _NAME_RE.match(name):
            raise FileNotFoundError(f"invalid scene name {name!r}")
        return self.data_root / "scenes" / name

    def get_scene(self, name: str) -> SceneBundle:
        with self._lock:
            if name in self._scenes:
                return self._scenes[name]
        manifest_path = self.scene_dir(name) / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"unknown scene {name!r}")
        scene, grid, manifest = load_scene_manifest(manifest_path)
        bands, stretch = default_render_settings(scene)
        bundle = SceneBundle(name, scene, grid, manifest, bands, stretch)
        with self._lock:
            self._scenes.setdefault(name, bundle)
            return self._scenes[name]

    # sessions -------------------------------------------------------------

    def _build_strategy(self, cfg: SessionConfig, grid: GridSpec) -> SamplingStrategy:
        model = None
        if cfg.strategy.needs_cluster_model:
            if cfg.assignments is None:
                raise ValueError(f"strategy {cfg.strategy.strategy!r} needs an assignments file")
            path = Path(cfg.assignments)
            if not path.is_absolute():
                for base in (self.data_root, self.scene_dir(cfg.scene)):
                    if (base / path).exists():
                        path = base / path
                        break
            model = import_assignments(path, grid)
        return SamplingStrategy(cfg.strategy, grid, model)

    def create_session(self, cfg: SessionConfig) -> "LiveSession":
        bundle = self.get_scene(cfg.scene)
        strategy = self._build_strategy(cfg, bundle.grid)
        session_id = uuid.uuid4().hex
        session_dir = self.data_root / "sessions" / session_id
        session_dir.mkdir(parents=True, exist_ok=True)
        live = LiveSession(
            session_id=session_id,
            config=cfg,
            core=AnnotationSession(strategy, cfg.budget, cfg.seed),
            bundle=bundle,
            session_dir=session_dir,
        )
        live.append_event({"event": "create", "session_id": session_id, "config": cfg.to_json()})
        with self._lock:
            self._sessions[session_id] = live
        return live

    def get_session(self, session_id: str) -> "LiveSession":
        with self._lock:
            if session_id not in self._sessions:
                raise KeyError(f"unknown session {session_id!r}")
            return self._sessions[session_id]


class LiveSession:
    """A served session: the core state machine plus lock and persistence."""

    def __init__(
        self,
        session_id: str,
        config: SessionConfig,
        core: AnnotationSession,
        bundle: SceneBundle,
        session_dir: Path,
    ):
        self.session_id = session_id
        self.config = config
        self.core = core
        self.bundle = bundle
        self.session_dir = session_dir
        self.lock = threading.Lock()

    @property
    def events_path(self) -> Path:
        return self.session_dir / "events.jsonl"

    def append_event(self, event: dict) -> None:
        with self.events_path.open("a") as fh:
            fh.write(json.dumps(event) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def write_snapshot(self) -> None:
        doc = {
            "session_id": self.session_id,
            "surface": self.core.surface.snapshot(),
            "tallies": self.core.tallies(),
            "rng_state": self.core.rng.bit_generator.state,
        }
        tmp = self.session_dir / "snapshot.json.tmp"
        tmp.write_text(json.dumps(doc))
        tmp.replace(self.session_dir / "snapshot.json")

    # the three mutations, each serialized and persisted before returning

    def next_patch(self) -> dict:
        with self.lock:
            had_pending = self.core.pending is not None
            ref, step = self.core.next_patch()
            if not had_pending:
                self.append_event({"event": "draw", "step": step, "row": ref.row, "col": ref.col})
            return {
                "patch": {"row": ref.row, "col": ref.col},
                "step": step,
                "tile_url": f"/tiles/{self.bundle.name}/{ref.row}/{ref.col}.png",
            }

    def submit(self, ref: PatchRef, label: str) -> dict:
        with self.lock:
            record = self.core.submit(ref, label)
            self.append_event({"event": "label", **record})
            if self.core.done or self.core.labels_done % SNAPSHOT_EVERY == 0:
                self.write_snapshot()
            return {**record, **self.core.tallies()}

    def state(self) -> dict:
        with self.lock:
            pending = self.core.pending
            return {
                "session_id": self.session_id,
                "config": self.config.to_json(),
                "pending": None if pending is None else {"row": pending.row, "col": pending.col},
                "pending_step": self.core.pending_step if pending is not None else None,
                **self.core.tallies(),
            }

    def stats(self) -> dict:
        with self.lock:
            return {"session_id": self.session_id, **self.core.tallies()}

    def heatmap(self, max_dim: int) -> dict:
        with self.lock:
            probs = self.core.surface.probs.reshape(self.bundle.grid.rows, self.bundle.grid.cols)
            h2, w2, pooled, factor = mean_pool(probs, max_dim)
            return {
                "h": h2,
                "w": w2,
                "pool_factor": factor,
                "probs": pooled.tolist(),
                "n_remaining": int(self.core.surface.n_remaining),
            }


def mean_pool(probs: np.ndarray, max_dim: int) -> tuple[int, int, np.ndarray, int]:
    """Mean-pool a (h, w) grid so max(h', w') <= max_dim, then renormalize.

    Edge blocks average over the cells they actually cover. Returns
    (h', w', pooled, factor).
    """
    if max_dim < 1:
        raise ValueError("max_dim must be >= 1")
    h, w = probs.shape
    factor = max(1, -(-max(h, w) // max_dim))
    h2, w2 = -(-h // factor), -(-w // factor)
    padded = np.zeros((h2 * factor, w2 * factor))
    padded[:h, :w] = probs
    counts = np.zeros_like(padded)
    counts[:h, :w] = 1.0
    block_sum = padded.reshape(h2, factor, w2, factor).sum(axis=(1, 3))
    block_n = counts.reshape(h2, factor, w2, factor).sum(axis=(1, 3))
    pooled = block_sum / block_n
    total = pooled.sum()
    if total > 0:
        pooled = pooled / total
    return h2, w2, pooled, factor


def replay_session(events_path: str | Path, store: SessionStore) -> AnnotationSession:
    """Rebuild a session from its event log; the recovery path and the oracle.

    Draws are re-executed against a fresh seeded RNG and checked against the
    logged cells, so silent log corruption cannot replay into a diverged
    state.
    """
    events_path = Path(events_path)
    lines = [json.loads(line) for line in events_path.read_text().splitlines() if line.strip()]
    if not lines or lines[0].get("event") != "create":
        raise ReplayMismatch(f"{events_path} does not start with a create event")
    cfg = SessionConfig.from_json(lines[0]["config"])
    bundle = store.get_scene(cfg.scene)
    strategy = store._build_strategy(cfg, bundle.grid)
    core = AnnotationSession(strategy, cfg.budget, cfg.seed)
    for ev in lines[1:]:
        if ev["event"] == "draw":
            ref, step = core.next_patch()
            if (step, ref.row, ref.col) != (ev["step"], ev["row"], ev["col"]):
                raise ReplayMismatch(
                    f"draw {ev['step']} replayed to ({ref.row},{ref.col}), "
                    f"log says ({ev['row']},{ev['col']})"
                )
        elif ev["event"] == "label":
            core.submit(PatchRef(ev["row"], ev["col"]), ev["label"])
        else:
            raise ReplayMismatch(f"unknown event type {ev['event']!r}")
    return core


# --- HTTP layer ------------------------------------------------------------


def create_app(data_root: str | Path | None = None, ui_dir: str | Path | None = None):
    """Build the FastAPI app around a SessionStore.

    ``data_root`` falls back to the GRIDSCOUT_DATA env var, then ./data.
    When ``ui_dir`` is given, its files are served under /ui.
    """
    from fastapi import Body, FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse, Response

    if data_root is None:
        data_root = os.environ.get(DATA_ROOT_ENV, "data")
    store = SessionStore(data_root)
    app = FastAPI(title="gridscout annotation service")
    app.state.store = store

    class ApiError(Exception):
        def __init__(self, status: int, code: str, message: str):
            self.status = status
            self.code = code
            self.message = message

    @app.exception_handler(ApiError)
    def _api_error(_request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": exc.message})

    @app.exception_handler(RequestValidationError)
    def _validation_error(_request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422, content={"code": "invalid_request", "message": str(exc.errors())})

    def _get_session(session_id: str) -> LiveSession:
        try:
            return store.get_session(session_id)
        except KeyError:
            raise ApiError(404, "unknown_session", f"no session with id {session_id!r}")

    def _require(body: dict, key: str, kind, where: str):
        if key not in body:
            raise ApiError(400, "invalid_config", f"{where} is missing {key!r}")
        value = body[key]
        if kind is int and isinstance(value, bool) or not isinstance(value, kind):
            raise ApiError(400, "invalid_config", f"{where}.{key} must be {kind.__name__}")
        return value

    @app.post("/sessions", status_code=201)
    def create_session(body: dict = Body(...)):
        scene = _require(body, "scene", str, "session config")
        budget = _require(body, "budget", int, "session config")
        seed = _require(body, "seed", int, "session config")
        strat_doc = _require(body, "strategy", dict, "session config")
        try:
            strategy = StrategyConfig(
                strategy=_require(strat_doc, "strategy", str, "strategy"),
                radius_m=float(strat_doc.get("radius_m", 200.0)),
                weight=strat_doc.get("weight"),
            )
            cfg = SessionConfig(
                scene=scene,
                strategy=strategy,
                budget=budget,
                seed=seed,
                assignments=body.get("assignments"),
            )
            live = store.create_session(cfg)
        except FileNotFoundError as exc:
            raise ApiError(400, "unresolvable_reference", str(exc))
        except ValueError as exc:
            raise ApiError(400, "invalid_config", str(exc))
        return {"session_id": live.session_id, "config": cfg.to_json()}

    @app.get("/sessions/{session_id}")
    def session_state(session_id: str):
        return _get_session(session_id).state()

    @app.get("/sessions/{session_id}/next")
    def next_patch(session_id: str):
        live = _get_session(session_id)
        try:
            return live.next_patch()
        except BudgetExhausted as exc:
            raise ApiError(409, exc.code, str(exc))
        except SurfaceExhausted as exc:
            raise ApiError(409, "surface_exhausted", str(exc))

    @app.post("/sessions/{session_id}/labels")
    def submit_label(session_id: str, body: dict = Body(...)):
        live = _get_session(session_id)
        patch = _require(body, "patch", dict, "label request")
        label = _require(body, "label", str, "label request")
        row = _require(patch, "row", int, "patch")
        col = _require(patch, "col", int, "patch")
        if label not in LABELS:
            raise ApiError(400, "invalid_label", f"label must be one of {LABELS}")
        try:
            return live.submit(PatchRef(row, col), label)
        except (NoPendingPatch, PatchMismatch) as exc:
            raise ApiError(409, exc.code, str(exc))

    @app.get("/sessions/{session_id}/surface")
    def surface_heatmap(session_id: str, max_dim: int = 64):
        live = _get_session(session_id)
        if max_dim < 1:
            raise ApiError(400, "invalid_request", "max_dim must be >= 1")
        return live.heatmap(max_dim)

    @app.get("/sessions/{session_id}/stats")
    def session_stats(session_id: str):
        return _get_session(session_id).stats()

    @app.get("/tiles/{scene}/{row}/{col}.png")
    def tile(scene: str, row: int, col: int):
        try:
            bundle = store.get_scene(scene)
        except FileNotFoundError as exc:
            raise ApiError(404, "unknown_scene", str(exc))
        ref = PatchRef(row, col)
        try:
            bundle.grid.check_ref(ref)
        except ValueError as exc:
            raise ApiError(404, "unknown_tile", str(exc))
        png = render_patch_png(bundle.scene, bundle.grid, ref, bundle.band_mapping, bundle.stretch)
        return Response(content=png, media_type="image/png")

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        ui_dir = Path(ui_dir)
        if not ui_dir.is_dir():
            raise FileNotFoundError(f"UI directory not found: {ui_dir}")
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app

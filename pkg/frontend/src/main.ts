/** DOM wiring: render the controller's view, map P/N/S keys to labels.
 *
 * The session id lives in the URL hash, so reloading mid-session resumes
 * the identical view straight from the server.
 */

import { ApiClient } from "./api.js";
import { heatmapCells } from "./heatmap.js";
import { Label, SessionController } from "./state.js";

const api = new ApiClient("");
const controller = new SessionController(api);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function renderHeatmap(canvas: HTMLCanvasElement, probs: number[][]): void {
  const h = probs.length;
  const w = h ? probs[0]!.length : 0;
  const ctx = canvas.getContext("2d");
  if (!ctx || !h || !w) return;
  const cell = Math.max(2, Math.floor(Math.min(canvas.width / w, canvas.height / h)));
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (const c of heatmapCells(probs)) {
    ctx.fillStyle = c.color;
    ctx.fillRect(c.col * cell, c.row * cell, cell, cell);
  }
}

function render(): void {
  const v = controller.view();
  el("setup").hidden = v.phase !== "idle";
  el("labeling").hidden = v.phase !== "labeling";
  el("summary").hidden = v.phase !== "summary";

  const banner = el("banner");
  banner.hidden = v.banner === null;
  banner.textContent = v.banner ?? "";

  if (v.tallies) {
    el("tally-positive").textContent = String(v.tallies.n_positive);
    el("tally-negative").textContent = String(v.tallies.n_negative);
    el("tally-skip").textContent = String(v.tallies.n_skip);
    el("budget-remaining").textContent = String(v.tallies.budget_remaining);
    el("summary-line").textContent =
      `${v.tallies.n_positive} positive, ${v.tallies.n_negative} negative, ` +
      `${v.tallies.n_skip} skipped of ${v.tallies.budget} labels`;
  }
  el("strategy-name").textContent = v.strategy ?? "";
  el("step-index").textContent = v.step === null ? "" : `step ${v.step}`;

  const tile = el<HTMLImageElement>("tile");
  if (v.tileUrl && tile.src !== v.tileUrl) tile.src = v.tileUrl;
  tile.hidden = v.tileUrl === null;

  for (const id of ["btn-positive", "btn-negative", "btn-skip"]) {
    el<HTMLButtonElement>(id).disabled = v.busy;
  }
  if (v.surface) renderHeatmap(el<HTMLCanvasElement>("heatmap"), v.surface.probs);
}

function sessionFromHash(): string | null {
  const match = window.location.hash.match(/#session=([A-Za-z0-9]+)/);
  return match ? match[1]! : null;
}

async function submit(label: Label): Promise<void> {
  try {
    await controller.label(label);
  } catch (err) {
    el("banner").hidden = false;
    el("banner").textContent = String(err);
  }
}

async function startFromForm(): Promise<void> {
  const strategy = el<HTMLSelectElement>("form-strategy").value;
  const body = {
    scene: el<HTMLInputElement>("form-scene").value,
    strategy: { strategy },
    budget: Number(el<HTMLInputElement>("form-budget").value),
    seed: Number(el<HTMLInputElement>("form-seed").value),
    assignments: el<HTMLInputElement>("form-assignments").value || undefined,
  };
  try {
    const id = await controller.create(body);
    window.location.hash = `session=${id}`;
  } catch (err) {
    el("banner").hidden = false;
    el("banner").textContent = String(err);
  }
}

export function boot(): void {
  controller.onChange(render);
  el("form-start").addEventListener("click", () => void startFromForm());
  el("btn-positive").addEventListener("click", () => void submit("positive"));
  el("btn-negative").addEventListener("click", () => void submit("negative"));
  el("btn-skip").addEventListener("click", () => void submit("skip"));
  document.addEventListener("keydown", (ev) => {
    const key = ev.key.toLowerCase();
    if (key === "p") void submit("positive");
    else if (key === "n") void submit("negative");
    else if (key === "s") void submit("skip");
  });
  const existing = sessionFromHash();
  if (existing) {
    controller.resume(existing).catch((err) => {
      el("banner").hidden = false;
      el("banner").textContent = String(err);
    });
  }
  render();
}

boot();

/** Session state machine: a pure projection of server responses.
 *
 * Nothing here updates optimistically. Every transition issues the REST
 * calls, waits, and rebuilds the view from what the server returned;
 * `resume` rebuilds the identical view from a bare session id, which is
 * also the page-reload path. Conflict responses (another client raced us)
 * resync the whole view and surface as a banner.
 */

import {
  ApiClient,
  ApiError,
  CreateSessionBody,
  PatchRef,
  SurfaceView,
  Tallies,
} from "./api.js";

export type Phase = "idle" | "labeling" | "summary";

export interface SessionView {
  phase: Phase;
  sessionId: string | null;
  strategy: string | null;
  step: number | null;
  patch: PatchRef | null;
  tileUrl: string | null;
  tallies: Tallies | null;
  surface: SurfaceView | null;
  banner: string | null;
  busy: boolean;
}

const EMPTY: SessionView = {
  phase: "idle",
  sessionId: null,
  strategy: null,
  step: null,
  patch: null,
  tileUrl: null,
  tallies: null,
  surface: null,
  banner: null,
  busy: false,
};

export const LABELS = ["positive", "negative", "skip"] as const;
export type Label = (typeof LABELS)[number];

export const HEATMAP_MAX_DIM = 64;

function pickTallies(t: Tallies): Tallies {
  return {
    n_positive: t.n_positive,
    n_negative: t.n_negative,
    n_skip: t.n_skip,
    labels_done: t.labels_done,
    budget: t.budget,
    budget_remaining: t.budget_remaining,
    done: t.done,
  };
}

export class SessionController {
  private current: SessionView = { ...EMPTY };
  private listeners: Array<(view: SessionView) => void> = [];

  constructor(private readonly api: ApiClient) {}

  view(): SessionView {
    return this.current;
  }

  onChange(listener: (view: SessionView) => void): void {
    this.listeners.push(listener);
  }

  private set(view: SessionView): void {
    this.current = view;
    for (const fn of this.listeners) fn(view);
  }

  async create(body: CreateSessionBody): Promise<string> {
    const created = await this.api.createSession(body);
    await this.resume(created.session_id);
    return created.session_id;
  }

  /** Rebuild the whole view from the server; create, reload, and conflict
   * recovery all land here so there is exactly one source of truth. */
  async resume(sessionId: string): Promise<void> {
    const state = await this.api.state(sessionId);
    const base: SessionView = {
      ...EMPTY,
      sessionId,
      strategy: state.config.strategy.strategy,
      tallies: pickTallies(state),
    };
    if (state.done) {
      const surface = await this.api.surface(sessionId, HEATMAP_MAX_DIM);
      this.set({ ...base, phase: "summary", surface });
      return;
    }
    // draw before reading the surface: a drawn patch is already committed
    // server-side, so this is the only order a reload can reproduce exactly
    const next = await this.api.next(sessionId);
    const surface = await this.api.surface(sessionId, HEATMAP_MAX_DIM);
    this.set({
      ...base,
      phase: "labeling",
      step: next.step,
      patch: next.patch,
      tileUrl: this.api.tileUrl(next.tile_url),
      surface,
    });
  }

  /** Post a label for the pending patch, then advance from the response. */
  async label(label: Label): Promise<void> {
    const v = this.current;
    if (v.busy || v.phase !== "labeling" || !v.sessionId || !v.patch) return;
    this.set({ ...v, busy: true });
    try {
      const result = await this.api.label(v.sessionId, v.patch, label);
      if (result.done) {
        const surface = await this.api.surface(v.sessionId, HEATMAP_MAX_DIM);
        // summary numbers come from the stats endpoint, not our arithmetic
        const stats = await this.api.stats(v.sessionId);
        this.set({
          ...v,
          phase: "summary",
          step: null,
          patch: null,
          tileUrl: null,
          tallies: pickTallies(stats),
          surface,
          banner: null,
          busy: false,
        });
        return;
      }
      const next = await this.api.next(v.sessionId);
      const surface = await this.api.surface(v.sessionId, HEATMAP_MAX_DIM);
      this.set({
        ...v,
        phase: "labeling",
        step: next.step,
        patch: next.patch,
        tileUrl: this.api.tileUrl(next.tile_url),
        tallies: pickTallies(result),
        surface,
        banner: null,
        busy: false,
      });
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // lost a race; the server state wins, we re-read all of it
        await this.resume(v.sessionId);
        this.set({ ...this.current, banner: `label not applied: ${err.message}` });
        return;
      }
      this.set({ ...this.current, busy: false });
      throw err;
    }
  }
}

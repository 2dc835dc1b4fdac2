/** Typed client for the annotation service REST API. */

export interface PatchRef {
  row: number;
  col: number;
}

export interface StrategyDoc {
  strategy: string;
  radius_m?: number;
  weight?: number | null;
}

export interface CreateSessionBody {
  scene: string;
  strategy: StrategyDoc;
  budget: number;
  seed: number;
  assignments?: string;
}

export interface SessionCreated {
  session_id: string;
  config: { scene: string; strategy: StrategyDoc; budget: number; seed: number };
}

export interface Tallies {
  n_positive: number;
  n_negative: number;
  n_skip: number;
  labels_done: number;
  budget: number;
  budget_remaining: number;
  done: boolean;
}

export interface SessionState extends Tallies {
  session_id: string;
  config: { scene: string; strategy: StrategyDoc; budget: number; seed: number };
  pending: PatchRef | null;
  pending_step: number | null;
}

export interface NextPatch {
  patch: PatchRef;
  step: number;
  tile_url: string;
}

export interface LabelResult extends Tallies {
  step: number;
  row: number;
  col: number;
  label: string;
  surface_event: string | null;
}

export interface SurfaceView {
  h: number;
  w: number;
  pool_factor: number;
  probs: number[][];
  n_remaining: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(resp: Response): Promise<never> {
  let code = "unknown_error";
  let message = `request failed with status ${resp.status}`;
  try {
    const body = await resp.json();
    if (typeof body.code === "string") code = body.code;
    if (typeof body.message === "string") message = body.message;
  } catch {
    // non-JSON error body; keep the fallback
  }
  throw new ApiError(resp.status, code, message);
}

export class ApiClient {
  constructor(
    readonly base: string = "",
    private readonly fetchFn: typeof fetch = globalThis.fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.base + path, init);
    if (!resp.ok) await parseError(resp);
    return (await resp.json()) as T;
  }

  createSession(body: CreateSessionBody): Promise<SessionCreated> {
    return this.request("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  state(sessionId: string): Promise<SessionState> {
    return this.request(`/sessions/${sessionId}`);
  }

  next(sessionId: string): Promise<NextPatch> {
    return this.request(`/sessions/${sessionId}/next`);
  }

  label(sessionId: string, patch: PatchRef, label: string): Promise<LabelResult> {
    return this.request(`/sessions/${sessionId}/labels`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ patch, label }),
    });
  }

  surface(sessionId: string, maxDim: number): Promise<SurfaceView> {
    return this.request(`/sessions/${sessionId}/surface?max_dim=${maxDim}`);
  }

  stats(sessionId: string): Promise<Tallies & { session_id: string }> {
    return this.request(`/sessions/${sessionId}/stats`);
  }

  tileUrl(path: string): string {
    return this.base + path;
  }
}

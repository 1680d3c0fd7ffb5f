/** Typed client for the guiding session service.
 *
 * Wire format: JSON everywhere; label maps travel as flat row-major
 * run-length pairs plus width/height; heatmaps as base64 PNG.  Every
 * response carries schema_version; errors are
 * {"error": {"code", "message"}} with an HTTP status.
 */

export interface LegendEntry {
  class_id: number;
  name: string;
  color: [number, number, number];
}

export type TurnKind = "text" | "pixel";

export interface Turn {
  kind: TurnKind;
  payload: Record<string, unknown>;
  noop: boolean;
  changed_pixels: number;
  miou: number | null;
  heatmap_b64: string | null;
}

export interface LabelsPayload {
  labels_rle: number[];
  width: number;
  height: number;
}

export interface SessionResponse extends LabelsPayload {
  schema_version: number;
  session_id: string;
  created_at: number;
  legend: LegendEntry[];
  miou: number | null;
  num_turns?: number;
}

export interface HintResponse extends LabelsPayload {
  schema_version: number;
  changed_pixels: number;
  miou: number | null;
  params_summary: Record<string, number> | null;
  noop?: boolean;
  heatmap_b64?: string | null;
  loss_trace?: number[];
  iterations?: number;
  converged?: boolean;
}

export interface ResetResponse extends LabelsPayload {
  schema_version: number;
  miou: number | null;
}

export interface SuggestResponse {
  schema_version: number;
  x: number;
  y: number;
  margin: number;
}

export interface HistoryResponse {
  schema_version: number;
  session_id: string;
  turns: Turn[];
}

export interface DeleteResponse {
  schema_version: number;
  deleted: boolean;
}

/** Server-reported failure: HTTP status plus the body's error envelope. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin request layer; the base URL is configurable per instance. */
export class GuideClient {
  private readonly fetchImpl: FetchLike;

  constructor(
    readonly baseUrl: string,
    fetchImpl?: FetchLike,
  ) {
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    let data: unknown = null;
    try {
      data = await resp.json();
    } catch {
      data = null;
    }
    if (!resp.ok) {
      const err = (data as { error?: { code?: string; message?: string } })
        ?.error;
      throw new ApiError(
        resp.status,
        err?.code ?? "http_error",
        err?.message ?? `HTTP ${resp.status}`,
      );
    }
    return data as T;
  }

  createSession(imageB64: string, labelsB64?: string): Promise<SessionResponse> {
    const body: Record<string, string> = { image_b64: imageB64 };
    if (labelsB64 !== undefined) body.labels_b64 = labelsB64;
    return this.request<SessionResponse>("POST", "/session", body);
  }

  getSession(sessionId: string): Promise<SessionResponse> {
    return this.request<SessionResponse>("GET", `/session/${sessionId}`);
  }

  textHint(sessionId: string, text: string): Promise<HintResponse> {
    return this.request<HintResponse>(
      "POST",
      `/session/${sessionId}/hint/text`,
      { text },
    );
  }

  pixelHint(
    sessionId: string,
    x: number,
    y: number,
    classId: number,
  ): Promise<HintResponse> {
    return this.request<HintResponse>(
      "POST",
      `/session/${sessionId}/hint/pixel`,
      { x, y, class_id: classId },
    );
  }

  suggestPixel(sessionId: string): Promise<SuggestResponse> {
    return this.request<SuggestResponse>(
      "GET",
      `/session/${sessionId}/suggest-pixel`,
    );
  }

  history(sessionId: string): Promise<HistoryResponse> {
    return this.request<HistoryResponse>(
      "GET",
      `/session/${sessionId}/history`,
    );
  }

  reset(sessionId: string): Promise<ResetResponse> {
    return this.request<ResetResponse>("POST", `/session/${sessionId}/reset`);
  }

  deleteSession(sessionId: string): Promise<DeleteResponse> {
    return this.request<DeleteResponse>("DELETE", `/session/${sessionId}`);
  }
}

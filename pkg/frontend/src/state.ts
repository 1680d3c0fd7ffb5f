/** Pure view-state transitions.  Every transition is driven by a server
 * response; the history list always mirrors the server's history
 * verbatim (no optimistic divergence). */

import type {
  HintResponse,
  LegendEntry,
  ResetResponse,
  SessionResponse,
  Turn,
} from "./api.js";
import { rleDecode } from "./rle.js";

export interface SuggestedPixel {
  x: number;
  y: number;
  margin: number;
}

export interface ViewState {
  sessionId: string | null;
  width: number;
  height: number;
  legend: LegendEntry[];
  /** Object/data URL of the uploaded image, for the base layer. */
  baseImageUrl: string | null;
  currentLabels: Int32Array | null;
  /** Labels before the latest hint, kept for the diff view. */
  previousLabels: Int32Array | null;
  /** Labels of the very first prediction; reset must restore these. */
  initialLabels: Int32Array | null;
  miou: number | null;
  heatmapB64: string | null;
  heatmapVisible: boolean;
  history: Turn[];
  suggested: SuggestedPixel | null;
  pending: boolean;
  /** changed_pixels reported by the server for the latest hint. */
  lastChanged: number | null;
  error: string | null;
  overlayOpacity: number;
}

export function emptyView(): ViewState {
  return {
    sessionId: null,
    width: 0,
    height: 0,
    legend: [],
    baseImageUrl: null,
    currentLabels: null,
    previousLabels: null,
    initialLabels: null,
    miou: null,
    heatmapB64: null,
    heatmapVisible: false,
    history: [],
    suggested: null,
    pending: false,
    lastChanged: null,
    error: null,
    overlayOpacity: 0.6,
  };
}

function decodeLabels(payload: {
  labels_rle: number[];
  width: number;
  height: number;
}): Int32Array {
  return rleDecode(payload.labels_rle, payload.width, payload.height);
}

export function beginSession(
  view: ViewState,
  resp: SessionResponse,
  baseImageUrl: string | null = null,
): ViewState {
  const labels = decodeLabels(resp);
  return {
    ...emptyView(),
    overlayOpacity: view.overlayOpacity,
    sessionId: resp.session_id,
    width: resp.width,
    height: resp.height,
    legend: resp.legend,
    baseImageUrl,
    currentLabels: labels,
    initialLabels: labels.slice(),
    miou: resp.miou,
  };
}

export function applyHintResponse(
  view: ViewState,
  resp: HintResponse,
): ViewState {
  const labels = decodeLabels(resp);
  return {
    ...view,
    previousLabels: view.currentLabels,
    currentLabels: labels,
    miou: resp.miou,
    heatmapB64: resp.heatmap_b64 ?? view.heatmapB64,
    suggested: null,
    lastChanged: resp.changed_pixels,
    error: null,
  };
}

export function applyReset(view: ViewState, resp: ResetResponse): ViewState {
  return {
    ...view,
    currentLabels: decodeLabels(resp),
    previousLabels: null,
    miou: resp.miou,
    heatmapB64: null,
    heatmapVisible: false,
    history: [],
    suggested: null,
    lastChanged: null,
    error: null,
  };
}

/** Replace the history wholesale with the server's list. */
export function setHistory(view: ViewState, turns: Turn[]): ViewState {
  return { ...view, history: turns.slice() };
}

export function setSuggested(
  view: ViewState,
  suggested: SuggestedPixel | null,
): ViewState {
  return { ...view, suggested };
}

export function setError(view: ViewState, message: string | null): ViewState {
  return { ...view, error: message };
}

/** Number of positions where two label maps differ; the client-side
 * recount that must equal the server's changed_pixels. */
export function countChanged(
  a: ArrayLike<number>,
  b: ArrayLike<number>,
): number {
  if (a.length !== b.length) {
    throw new Error(`label maps differ in size: ${a.length} vs ${b.length}`);
  }
  let n = 0;
  for (let i = 0; i < a.length; i++) {
    if (a[i] !== b[i]) n += 1;
  }
  return n;
}

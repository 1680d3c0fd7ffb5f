import { describe, expect, it } from "vitest";
import type {
  HintResponse,
  ResetResponse,
  SessionResponse,
  Turn,
} from "../src/api.js";
import { rleEncode } from "../src/rle.js";
import {
  applyHintResponse,
  applyReset,
  beginSession,
  countChanged,
  emptyView,
  setHistory,
  setSuggested,
} from "../src/state.js";

const LEGEND = [
  { class_id: 0, name: "sky", color: [132, 185, 232] as [number, number, number] },
  { class_id: 1, name: "grass", color: [88, 158, 70] as [number, number, number] },
];

function sessionResponse(labels: number[]): SessionResponse {
  return {
    schema_version: 1,
    session_id: "abc123",
    created_at: 0,
    legend: LEGEND,
    miou: 0.5,
    labels_rle: rleEncode(labels),
    width: 2,
    height: 2,
  };
}

function hintResponse(labels: number[], changed: number): HintResponse {
  return {
    schema_version: 1,
    changed_pixels: changed,
    miou: 0.75,
    params_summary: { alpha: 0.1 },
    heatmap_b64: "aGVhdA==",
    labels_rle: rleEncode(labels),
    width: 2,
    height: 2,
  };
}

describe("beginSession", () => {
  it("decodes labels and snapshots them as the initial prediction", () => {
    const view = beginSession(emptyView(), sessionResponse([0, 0, 1, 1]));
    expect(view.sessionId).toBe("abc123");
    expect(Array.from(view.currentLabels!)).toEqual([0, 0, 1, 1]);
    expect(Array.from(view.initialLabels!)).toEqual([0, 0, 1, 1]);
    expect(view.currentLabels!.length).toBe(view.width * view.height);
    expect(view.history).toEqual([]);
    expect(view.miou).toBe(0.5);
  });

  it("preserves the user's opacity preference across sessions", () => {
    const view = { ...emptyView(), overlayOpacity: 0.9 };
    expect(
      beginSession(view, sessionResponse([0, 0, 1, 1])).overlayOpacity,
    ).toBe(0.9);
  });
});

describe("applyHintResponse", () => {
  it("keeps the previous overlay for the diff view", () => {
    let view = beginSession(emptyView(), sessionResponse([0, 0, 1, 1]));
    view = applyHintResponse(view, hintResponse([0, 1, 1, 1], 1));
    expect(Array.from(view.previousLabels!)).toEqual([0, 0, 1, 1]);
    expect(Array.from(view.currentLabels!)).toEqual([0, 1, 1, 1]);
    expect(view.lastChanged).toBe(1);
    expect(view.heatmapB64).toBe("aGVhdA==");
    expect(view.suggested).toBeNull();
  });

  it("keeps an existing heatmap when a pixel hint has none", () => {
    let view = beginSession(emptyView(), sessionResponse([0, 0, 1, 1]));
    view = applyHintResponse(view, hintResponse([0, 1, 1, 1], 1));
    const pixelResp = {
      ...hintResponse([1, 1, 1, 1], 1),
      heatmap_b64: null,
    };
    view = applyHintResponse(view, pixelResp);
    expect(view.heatmapB64).toBe("aGVhdA==");
  });
});

describe("applyReset", () => {
  it("restores the initial prediction view and clears history", () => {
    let view = beginSession(emptyView(), sessionResponse([0, 0, 1, 1]));
    view = applyHintResponse(view, hintResponse([1, 1, 1, 1], 2));
    view = setHistory(view, [
      {
        kind: "text",
        payload: { text: "x" },
        noop: false,
        changed_pixels: 2,
        miou: null,
        heatmap_b64: null,
      },
    ]);
    const resetResp: ResetResponse = {
      schema_version: 1,
      miou: 0.5,
      labels_rle: rleEncode([0, 0, 1, 1]),
      width: 2,
      height: 2,
    };
    view = applyReset(view, resetResp);
    expect(Array.from(view.currentLabels!)).toEqual(
      Array.from(view.initialLabels!),
    );
    expect(view.previousLabels).toBeNull();
    expect(view.history).toEqual([]);
    expect(view.heatmapB64).toBeNull();
    expect(view.suggested).toBeNull();
  });
});

describe("setHistory", () => {
  it("mirrors the server list exactly instead of appending", () => {
    const turns: Turn[] = [
      {
        kind: "text",
        payload: { text: "a" },
        noop: false,
        changed_pixels: 3,
        miou: 0.6,
        heatmap_b64: null,
      },
      {
        kind: "pixel",
        payload: { x: 1, y: 0, class_id: 1 },
        noop: false,
        changed_pixels: 1,
        miou: 0.7,
        heatmap_b64: null,
      },
    ];
    let view = setHistory(emptyView(), turns.slice(0, 1));
    view = setHistory(view, turns);
    expect(view.history).toEqual(turns);
    view = setHistory(view, []);
    expect(view.history).toEqual([]);
  });
});

describe("countChanged", () => {
  it("counts differing positions", () => {
    expect(countChanged([0, 1, 2, 3], [0, 9, 2, 8])).toBe(2);
    expect(countChanged([1, 1], [1, 1])).toBe(0);
  });

  it("rejects size mismatches", () => {
    expect(() => countChanged([0], [0, 1])).toThrow(/size/);
  });
});

describe("setSuggested", () => {
  it("stores and clears the marker", () => {
    let view = setSuggested(emptyView(), { x: 3, y: 4, margin: 0.02 });
    expect(view.suggested).toEqual({ x: 3, y: 4, margin: 0.02 });
    view = setSuggested(view, null);
    expect(view.suggested).toBeNull();
  });
});

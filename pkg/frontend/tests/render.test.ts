import { describe, expect, it } from "vitest";
import type { LegendEntry } from "../src/api.js";
import {
  changedMask,
  changedOutline,
  colorForClass,
  heatmapUrl,
  overlayRGBA,
  sortLegendForDisplay,
} from "../src/render.js";

const LEGEND: LegendEntry[] = [
  { class_id: 0, name: "sky", color: [10, 20, 30] },
  { class_id: 1, name: "grass", color: [40, 50, 60] },
];

describe("overlayRGBA", () => {
  it("colors each pixel by its class, stable across calls", () => {
    const labels = Int32Array.from([0, 1, 1, 0]);
    const once = overlayRGBA(labels, LEGEND, 0.5);
    const twice = overlayRGBA(labels, LEGEND, 0.5);
    expect(once).toEqual(twice);
    expect(once.length).toBe(16);
    expect(Array.from(once.slice(0, 4))).toEqual([10, 20, 30, 128]);
    expect(Array.from(once.slice(4, 8))).toEqual([40, 50, 60, 128]);
  });

  it("maps opacity 0 and 1 to transparent and opaque", () => {
    const labels = Int32Array.from([0]);
    expect(overlayRGBA(labels, LEGEND, 0)[3]).toBe(0);
    expect(overlayRGBA(labels, LEGEND, 1)[3]).toBe(255);
  });

  it("falls back to gray for a class missing from the legend", () => {
    const buf = overlayRGBA(Int32Array.from([9]), LEGEND, 1);
    expect(Array.from(buf.slice(0, 3))).toEqual([128, 128, 128]);
    expect(colorForClass(LEGEND, 9)).toEqual([128, 128, 128]);
  });
});

describe("changedMask / changedOutline", () => {
  it("marks exactly the differing pixels", () => {
    const prev = [0, 0, 0, 0, 1, 1, 1, 1, 2];
    const next = [0, 0, 0, 0, 1, 2, 1, 1, 2];
    expect(Array.from(changedMask(prev, next))).toEqual(
      [0, 0, 0, 0, 0, 1, 0, 0, 0],
    );
  });

  it("recount through the mask equals the changed-pixel count", () => {
    const prev = [0, 1, 2, 3, 4, 5];
    const next = [0, 1, 9, 3, 9, 5];
    const mask = changedMask(prev, next);
    const recount = mask.reduce((acc, v) => acc + v, 0);
    expect(recount).toBe(2);
  });

  it("outlines the border of a changed block, not its interior", () => {
    // 4x4: a 3x3 changed block in the top-left; only its center (1,1)
    // is fully surrounded by changed pixels, so it stays transparent
    const prev = new Array(16).fill(0);
    const next = prev.slice();
    for (const i of [0, 1, 2, 4, 5, 6, 8, 9, 10]) next[i] = 7;
    const outline = changedOutline(prev, next, 4, 4);
    const painted = [];
    for (let i = 0; i < 16; i++) {
      if (outline[i * 4 + 3] !== 0) painted.push(i);
    }
    expect(painted).toEqual([0, 1, 2, 4, 6, 8, 9, 10]);
  });

  it("an unchanged map paints nothing", () => {
    const same = [1, 2, 3, 4];
    const outline = changedOutline(same, same, 2, 2);
    expect(outline.every((v) => v === 0)).toBe(true);
  });

  it("rejects mismatched sizes", () => {
    expect(() => changedMask([1], [1, 2])).toThrow(/size/);
  });
});

describe("sortLegendForDisplay", () => {
  it("puts classes with identical colors next to each other", () => {
    const legend: LegendEntry[] = [
      { class_id: 0, name: "sky", color: [132, 185, 232] },
      { class_id: 1, name: "grass", color: [88, 158, 70] },
      { class_id: 2, name: "sand", color: [190, 166, 112] },
      { class_id: 3, name: "water", color: [132, 185, 232] },
      { class_id: 4, name: "mud", color: [190, 166, 112] },
    ];
    const order = sortLegendForDisplay(legend).map((e) => e.name);
    expect(Math.abs(order.indexOf("sky") - order.indexOf("water"))).toBe(1);
    expect(Math.abs(order.indexOf("sand") - order.indexOf("mud"))).toBe(1);
  });

  it("is deterministic and keeps every entry exactly once", () => {
    const legend: LegendEntry[] = [
      { class_id: 2, name: "c", color: [1, 1, 1] },
      { class_id: 0, name: "a", color: [200, 0, 0] },
      { class_id: 1, name: "b", color: [0, 200, 0] },
    ];
    const a = sortLegendForDisplay(legend);
    const b = sortLegendForDisplay(legend.slice().reverse());
    expect(a).toEqual(b);
    expect(new Set(a.map((e) => e.class_id)).size).toBe(3);
  });

  it("handles an empty legend", () => {
    expect(sortLegendForDisplay([])).toEqual([]);
  });
});

describe("heatmapUrl", () => {
  it("wraps base64 PNG bytes in a data URL", () => {
    expect(heatmapUrl("QUJD")).toBe("data:image/png;base64,QUJD");
  });
});

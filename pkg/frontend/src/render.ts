/** Pixel-buffer construction for the canvas layers.  All functions are
 * pure: they map label arrays and the server legend to RGBA buffers,
 * so rendered colors are a fixed function of class id. */

import type { LegendEntry } from "./api.js";

export type Rgb = [number, number, number];

const FALLBACK_COLOR: Rgb = [128, 128, 128];

export function colorForClass(legend: LegendEntry[], classId: number): Rgb {
  const entry = legend.find((e) => e.class_id === classId);
  return entry ? entry.color : FALLBACK_COLOR;
}

function colorLookup(legend: LegendEntry[]): Map<number, Rgb> {
  const map = new Map<number, Rgb>();
  for (const entry of legend) map.set(entry.class_id, entry.color);
  return map;
}

/** Class-colored overlay, RGBA, length width*height*4. */
export function overlayRGBA(
  labels: Int32Array,
  legend: LegendEntry[],
  opacity: number,
): Uint8ClampedArray {
  const colors = colorLookup(legend);
  const alpha = Math.max(0, Math.min(255, Math.round(opacity * 255)));
  const out = new Uint8ClampedArray(labels.length * 4);
  for (let i = 0; i < labels.length; i++) {
    const rgb = colors.get(labels[i]) ?? FALLBACK_COLOR;
    const o = i * 4;
    out[o] = rgb[0];
    out[o + 1] = rgb[1];
    out[o + 2] = rgb[2];
    out[o + 3] = alpha;
  }
  return out;
}

/** Mask of positions whose label changed between two maps. */
export function changedMask(
  prev: ArrayLike<number>,
  next: ArrayLike<number>,
): Uint8Array {
  if (prev.length !== next.length) {
    throw new Error(
      `label maps differ in size: ${prev.length} vs ${next.length}`,
    );
  }
  const mask = new Uint8Array(next.length);
  for (let i = 0; i < next.length; i++) {
    mask[i] = prev[i] !== next[i] ? 1 : 0;
  }
  return mask;
}

/** Outline layer for the diff view: a changed pixel is painted only if
 * at least one 4-neighbor is unchanged (or it sits on the image edge),
 * so changed regions show as outlines rather than solid blocks. */
export function changedOutline(
  prev: ArrayLike<number>,
  next: ArrayLike<number>,
  width: number,
  height: number,
  color: Rgb = [255, 48, 48],
): Uint8ClampedArray {
  const mask = changedMask(prev, next);
  const out = new Uint8ClampedArray(width * height * 4);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = y * width + x;
      if (!mask[i]) continue;
      const onEdge =
        x === 0 || y === 0 || x === width - 1 || y === height - 1;
      const boundary =
        onEdge ||
        !mask[i - 1] ||
        !mask[i + 1] ||
        !mask[i - width] ||
        !mask[i + width];
      if (!boundary) continue;
      const o = i * 4;
      out[o] = color[0];
      out[o + 1] = color[1];
      out[o + 2] = color[2];
      out[o + 3] = 255;
    }
  }
  return out;
}

function rgbDistance(a: Rgb, b: Rgb): number {
  const dr = a[0] - b[0];
  const dg = a[1] - b[1];
  const db = a[2] - b[2];
  return dr * dr + dg * dg + db * db;
}

/** Order the legend so similar colors sit next to each other: the
 * confusable classes (which share a palette by construction) become
 * visually adjacent in the class picker.  Deterministic: starts from
 * the lowest class id and greedily chains nearest colors, breaking
 * ties toward the smaller class id. */
export function sortLegendForDisplay(legend: LegendEntry[]): LegendEntry[] {
  if (legend.length === 0) return [];
  const rest = [...legend].sort((a, b) => a.class_id - b.class_id);
  const out: LegendEntry[] = [rest.shift() as LegendEntry];
  while (rest.length > 0) {
    const last = out[out.length - 1];
    let bestIndex = 0;
    let bestDist = Infinity;
    for (let i = 0; i < rest.length; i++) {
      const d = rgbDistance(last.color, rest[i].color);
      if (d < bestDist) {
        bestDist = d;
        bestIndex = i;
      }
    }
    out.push(rest.splice(bestIndex, 1)[0]);
  }
  return out;
}

export function heatmapUrl(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

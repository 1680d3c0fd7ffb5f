import { describe, expect, it } from "vitest";
import { rleDecode, rleEncode } from "../src/rle.js";

/** Small deterministic generator so round trips cover many shapes. */
function lcg(seed: number): () => number {
  let s = seed >>> 0;
  return () => {
    s = (s * 1664525 + 1013904223) >>> 0;
    return s / 2 ** 32;
  };
}

describe("rleDecode", () => {
  it("expands value/count pairs row-major", () => {
    expect(Array.from(rleDecode([7, 3, 2, 1], 2, 2))).toEqual([7, 7, 7, 2]);
  });

  it("handles a single full-image run", () => {
    const out = rleDecode([0, 16], 4, 4);
    expect(out.length).toBe(16);
    expect(out.every((v) => v === 0)).toBe(true);
  });

  it("rejects odd-length data", () => {
    expect(() => rleDecode([1, 2, 3], 2, 2)).toThrow(/pairs/);
  });

  it("rejects a count sum below the pixel count", () => {
    expect(() => rleDecode([1, 3], 2, 2)).toThrow(/sum/);
  });

  it("rejects a count sum above the pixel count", () => {
    expect(() => rleDecode([1, 5], 2, 2)).toThrow(/exceed/);
  });

  it("rejects negative counts and non-integers", () => {
    expect(() => rleDecode([1, -1, 1, 5], 2, 2)).toThrow(/bad run/);
    expect(() => rleDecode([1.5, 4], 2, 2)).toThrow(/bad run/);
  });
});

describe("round trip", () => {
  it("decode(encode(x)) is x for random label maps", () => {
    const rand = lcg(7);
    for (let trial = 0; trial < 50; trial++) {
      const width = 1 + Math.floor(rand() * 9);
      const height = 1 + Math.floor(rand() * 9);
      const labels = Int32Array.from({ length: width * height }, () =>
        Math.floor(rand() * 4),
      );
      const rle = rleEncode(labels);
      expect(rle.length % 2).toBe(0);
      expect(Array.from(rleDecode(rle, width, height))).toEqual(
        Array.from(labels),
      );
    }
  });

  it("encodes an empty map to an empty list", () => {
    expect(rleEncode([])).toEqual([]);
  });

  it("merges equal neighbors into one run", () => {
    expect(rleEncode([5, 5, 5, 5])).toEqual([5, 4]);
  });
});

/** Flat row-major [value, count, value, count, ...] run-length codec —
 * the label-map wire format of the session service. */

export function rleDecode(
  rle: readonly number[],
  width: number,
  height: number,
): Int32Array {
  if (rle.length % 2 !== 0) {
    throw new Error("run-length data must be value/count pairs");
  }
  const out = new Int32Array(width * height);
  let at = 0;
  for (let i = 0; i < rle.length; i += 2) {
    const value = rle[i];
    const count = rle[i + 1];
    if (!Number.isInteger(value) || !Number.isInteger(count) || count < 0) {
      throw new Error(`bad run at pair ${i / 2}: (${value}, ${count})`);
    }
    if (at + count > out.length) {
      throw new Error(
        `run lengths exceed ${out.length} pixels (${width}x${height})`,
      );
    }
    out.fill(value, at, at + count);
    at += count;
  }
  if (at !== out.length) {
    throw new Error(`run lengths sum to ${at}, expected ${out.length}`);
  }
  return out;
}

export function rleEncode(labels: ArrayLike<number>): number[] {
  const out: number[] = [];
  if (labels.length === 0) return out;
  let value = labels[0];
  let count = 1;
  for (let i = 1; i < labels.length; i++) {
    if (labels[i] === value) {
      count += 1;
    } else {
      out.push(value, count);
      value = labels[i];
      count = 1;
    }
  }
  out.push(value, count);
  return out;
}

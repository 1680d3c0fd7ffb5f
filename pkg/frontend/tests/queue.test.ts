import { describe, expect, it } from "vitest";
import { SerialQueue } from "../src/queue.js";

function deferred<T>() {
  let resolve!: (v: T) => void;
  let reject!: (e: unknown) => void;
  const promise = new Promise<T>((res, rej) => {
    resolve = res;
    reject = rej;
  });
  return { promise, resolve, reject };
}

describe("SerialQueue", () => {
  it("runs a rapid double submit strictly one after the other", async () => {
    const queue = new SerialQueue();
    const first = deferred<void>();
    const events: string[] = [];

    const a = queue.run(async () => {
      events.push("a:start");
      await first.promise;
      events.push("a:end");
    });
    const b = queue.run(async () => {
      events.push("b:start");
    });

    await Promise.resolve();
    expect(events).toEqual(["a:start"]);
    expect(queue.busy).toBe(true);

    first.resolve();
    await Promise.all([a, b]);
    expect(events).toEqual(["a:start", "a:end", "b:start"]);
    expect(queue.busy).toBe(false);
  });

  it("keeps results matched to their own task", async () => {
    const queue = new SerialQueue();
    const one = queue.run(async () => 1);
    const two = queue.run(async () => 2);
    expect(await one).toBe(1);
    expect(await two).toBe(2);
  });

  it("a failing task rejects its caller but not later tasks", async () => {
    const queue = new SerialQueue();
    const boom = queue.run(async () => {
      throw new Error("boom");
    });
    const after = queue.run(async () => "fine");
    await expect(boom).rejects.toThrow("boom");
    expect(await after).toBe("fine");
    expect(queue.busy).toBe(false);
  });
});

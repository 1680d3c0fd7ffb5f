/** Full UI loop against a live service: upload -> text hint -> pixel
 * hint -> reset, with client-side changed-pixel recounts checked
 * against the server's counts, and the history view rebuilt after a
 * simulated refresh. */

import { type ChildProcess, spawn } from "node:child_process";
import { readFileSync } from "node:fs";
import path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ApiError, GuideClient } from "../src/api.js";
import {
  applyHintResponse,
  applyReset,
  beginSession,
  countChanged,
  emptyView,
  setHistory,
} from "../src/state.js";

const here = path.dirname(fileURLToPath(import.meta.url));
const fixture = (name: string) => path.join(here, "fixtures", name);

let server: ChildProcess;
let base = "";

async function waitForReady(proc: ChildProcess): Promise<number> {
  return new Promise((resolve, reject) => {
    let buffer = "";
    const timer = setTimeout(
      () => reject(new Error(`service never became ready: ${buffer}`)),
      120_000,
    );
    proc.stdout!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const match = buffer.match(/READY (\d+)/);
      if (match) {
        clearTimeout(timer);
        resolve(Number(match[1]));
      }
    });
    proc.on("exit", (code) => {
      clearTimeout(timer);
      reject(new Error(`service exited early (code ${code}): ${buffer}`));
    });
  });
}

async function waitForHttp(url: string): Promise<void> {
  const deadline = Date.now() + 60_000;
  for (;;) {
    try {
      const resp = await fetch(url);
      if (resp.status === 404) return;
    } catch {
      // not listening yet
    }
    if (Date.now() > deadline) throw new Error("service HTTP never came up");
    await new Promise((r) => setTimeout(r, 200));
  }
}

beforeAll(async () => {
  server = spawn("python3", [fixture("serve_app.py"), "--port", "0"], {
    stdio: ["ignore", "pipe", "pipe"],
  });
  let stderr = "";
  server.stderr!.on("data", (chunk: Buffer) => {
    stderr += chunk.toString();
  });
  server.on("exit", (code) => {
    if (code && code !== 0) console.error(`service stderr:\n${stderr}`);
  });
  const port = await waitForReady(server);
  base = `http://127.0.0.1:${port}`;
  await waitForHttp(`${base}/session/warmup-probe`);
});

afterAll(() => {
  server?.kill();
});

describe("UI loop against a running service", () => {
  it("upload -> text hint -> pixel hint -> reset, with exact recounts", async () => {
    const client = new GuideClient(base);
    const imageB64 = readFileSync(fixture("scene.png")).toString("base64");
    const labelsB64 = readFileSync(fixture("scene_labels.png")).toString(
      "base64",
    );

    // upload_and_start: overlay data must cover the full image
    const created = await client.createSession(imageB64, labelsB64);
    let view = beginSession(emptyView(), created);
    expect(view.currentLabels!.length).toBe(created.width * created.height);
    expect(created.legend.length).toBeGreaterThan(0);
    expect(created.miou).not.toBeNull();

    // text hint: client recount must equal the server's changed_pixels
    const beforeText = view.currentLabels!;
    const textResp = await client.textHint(
      created.session_id,
      "find the mud on the bottom",
    );
    view = applyHintResponse(view, textResp);
    expect(countChanged(beforeText, view.currentLabels!)).toBe(
      textResp.changed_pixels,
    );
    expect(textResp.noop).toBe(false);

    // pixel hint: same recount contract, plus optimizer telemetry
    const beforePixel = view.currentLabels!;
    const pixelResp = await client.pixelHint(created.session_id, 5, 17, 2);
    view = applyHintResponse(view, pixelResp);
    expect(countChanged(beforePixel, view.currentLabels!)).toBe(
      pixelResp.changed_pixels,
    );
    expect(pixelResp.iterations).toBeGreaterThanOrEqual(1);

    // suggested pixel lands inside the canvas
    const suggested = await client.suggestPixel(created.session_id);
    expect(suggested.x).toBeGreaterThanOrEqual(0);
    expect(suggested.x).toBeLessThan(created.width);
    expect(suggested.y).toBeGreaterThanOrEqual(0);
    expect(suggested.y).toBeLessThan(created.height);
    expect(suggested.margin).toBeGreaterThanOrEqual(0);

    // history view matches GET /history after a simulated refresh
    const history = await client.history(created.session_id);
    view = setHistory(view, history.turns);
    expect(view.history.map((t) => t.kind)).toEqual(["text", "pixel"]);

    const freshClient = new GuideClient(base);
    const refreshed = await freshClient.getSession(created.session_id);
    expect(refreshed.num_turns).toBe(2);
    let rebuilt = beginSession(emptyView(), refreshed);
    rebuilt = setHistory(
      rebuilt,
      (await freshClient.history(created.session_id)).turns,
    );
    expect(rebuilt.history).toEqual(view.history);
    expect(Array.from(rebuilt.currentLabels!)).toEqual(
      Array.from(view.currentLabels!),
    );

    // reset restores the initial prediction bit-identically
    const resetResp = await client.reset(created.session_id);
    view = applyReset(view, resetResp);
    expect(Array.from(view.currentLabels!)).toEqual(
      Array.from(view.initialLabels!),
    );
    expect(view.history).toEqual([]);
    expect((await client.history(created.session_id)).turns).toEqual([]);

    // an empty text hint is recorded as a no-op turn
    const noopResp = await client.textHint(created.session_id, "   ");
    expect(noopResp.noop).toBe(true);
    expect(noopResp.changed_pixels).toBe(0);
    const noopTurns = (await client.history(created.session_id)).turns;
    expect(noopTurns.length).toBe(1);
    expect(noopTurns[0].noop).toBe(true);

    // cleanup: a deleted session stops existing
    await client.deleteSession(created.session_id);
    await expect(client.getSession(created.session_id)).rejects.toMatchObject({
      status: 404,
      code: "not_found",
    });
  });

  it("server-side validation errors surface with their code", async () => {
    const client = new GuideClient(base);
    await expect(client.getSession("nope")).rejects.toSatisfy(
      (err: unknown) =>
        err instanceof ApiError &&
        err.status === 404 &&
        err.code === "not_found",
    );
    const imageB64 = readFileSync(fixture("scene.png")).toString("base64");
    const created = await client.createSession(imageB64);
    await expect(
      client.pixelHint(created.session_id, 999, 0, 0),
    ).rejects.toMatchObject({ status: 422, code: "out_of_bounds" });
    await client.deleteSession(created.session_id);
  });
});

/** DOM wiring for the guiding loop: upload an image, view the overlay
 * and legend, type text hints or click pixels, inspect diffs, heatmap,
 * and history.  All state transitions are driven by server responses;
 * requests are serialized per session. */

import { ApiError, GuideClient, type LegendEntry } from "./api.js";
import { SerialQueue } from "./queue.js";
import {
  changedOutline,
  heatmapUrl,
  overlayRGBA,
  sortLegendForDisplay,
} from "./render.js";
import {
  applyHintResponse,
  applyReset,
  beginSession,
  countChanged,
  emptyView,
  setError,
  setHistory,
  setSuggested,
  type ViewState,
} from "./state.js";

const SCALE = 8;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function defaultApiBase(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("api");
  return fromQuery ?? "http://127.0.0.1:8000";
}

async function fileToBase64(file: File): Promise<string> {
  const dataUrl = await new Promise<string>((resolve, reject) => {
    const reader = new FileReader();
    reader.onload = () => resolve(reader.result as string);
    reader.onerror = () => reject(reader.error);
    reader.readAsDataURL(file);
  });
  const comma = dataUrl.indexOf(",");
  return dataUrl.slice(comma + 1);
}

class App {
  private view: ViewState = emptyView();
  private client: GuideClient;
  private readonly queue = new SerialQueue();
  private selectedClass = 0;
  private flickerTimer: number | null = null;
  private flickerShowPrevious = false;

  private readonly apiInput = el<HTMLInputElement>("api-base");
  private readonly fileInput = el<HTMLInputElement>("file-input");
  private readonly baseCanvas = el<HTMLCanvasElement>("base-canvas");
  private readonly overlayCanvas = el<HTMLCanvasElement>("overlay-canvas");
  private readonly diffCanvas = el<HTMLCanvasElement>("diff-canvas");
  private readonly heatmapImg = el<HTMLImageElement>("heatmap-img");
  private readonly marker = el<HTMLDivElement>("pixel-marker");
  private readonly legendList = el<HTMLDivElement>("legend");
  private readonly historyList = el<HTMLOListElement>("history");
  private readonly statusLine = el<HTMLSpanElement>("status");
  private readonly errorBox = el<HTMLDivElement>("error");
  private readonly textInput = el<HTMLInputElement>("hint-text");
  private readonly opacitySlider = el<HTMLInputElement>("opacity");
  private readonly heatmapToggle = el<HTMLInputElement>("heatmap-toggle");
  private readonly flickerToggle = el<HTMLInputElement>("flicker-toggle");

  constructor() {
    this.apiInput.value = defaultApiBase();
    this.client = new GuideClient(this.apiInput.value);
    this.apiInput.addEventListener("change", () => {
      this.client = new GuideClient(this.apiInput.value.replace(/\/$/, ""));
    });

    el<HTMLButtonElement>("upload-btn").addEventListener("click", () =>
      this.upload(),
    );
    el<HTMLFormElement>("hint-form").addEventListener("submit", (ev) => {
      ev.preventDefault();
      this.submitText();
    });
    el<HTMLButtonElement>("suggest-btn").addEventListener("click", () =>
      this.suggest(),
    );
    el<HTMLButtonElement>("reset-btn").addEventListener("click", () =>
      this.reset(),
    );
    el<HTMLButtonElement>("delete-btn").addEventListener("click", () =>
      this.remove(),
    );
    this.overlayCanvas.addEventListener("click", (ev) => this.clickPixel(ev));
    this.opacitySlider.addEventListener("input", () => {
      this.view = { ...this.view, overlayOpacity: +this.opacitySlider.value };
      this.render();
    });
    this.heatmapToggle.addEventListener("change", () => {
      this.view = { ...this.view, heatmapVisible: this.heatmapToggle.checked };
      this.render();
    });
    this.flickerToggle.addEventListener("change", () => this.setFlicker());
    this.render();
  }

  /** Serialize a server round trip; UI state only changes on response. */
  private act(task: () => Promise<void>): void {
    void this.queue
      .run(async () => {
        this.view = setError(this.view, null);
        this.render();
        await task();
      })
      .catch((err: unknown) => {
        const message =
          err instanceof ApiError
            ? `${err.code}: ${err.message}`
            : String(err);
        this.view = setError(this.view, message);
      })
      .finally(() => this.render());
  }

  private requireSession(): string {
    const id = this.view.sessionId;
    if (!id) throw new Error("no active session — upload an image first");
    return id;
  }

  private async refreshHistory(sessionId: string): Promise<void> {
    const hist = await this.client.history(sessionId);
    this.view = setHistory(this.view, hist.turns);
  }

  private upload(): void {
    const file = this.fileInput.files?.[0];
    if (!file) return;
    this.act(async () => {
      const b64 = await fileToBase64(file);
      const resp = await this.client.createSession(b64);
      this.view = beginSession(this.view, resp, URL.createObjectURL(file));
      await this.refreshHistory(resp.session_id);
    });
  }

  private submitText(): void {
    const text = this.textInput.value;
    this.act(async () => {
      const id = this.requireSession();
      const before = this.view.currentLabels;
      const resp = await this.client.textHint(id, text);
      this.view = applyHintResponse(this.view, resp);
      if (before && countChanged(before, this.view.currentLabels!) !==
          resp.changed_pixels) {
        throw new Error("changed-pixel recount disagrees with the server");
      }
      await this.refreshHistory(id);
      this.textInput.value = "";
    });
  }

  private clickPixel(ev: MouseEvent): void {
    if (!this.view.sessionId || this.view.pending) return;
    const rect = this.overlayCanvas.getBoundingClientRect();
    const x = Math.floor(
      ((ev.clientX - rect.left) / rect.width) * this.view.width,
    );
    const y = Math.floor(
      ((ev.clientY - rect.top) / rect.height) * this.view.height,
    );
    if (x < 0 || y < 0 || x >= this.view.width || y >= this.view.height) {
      return;
    }
    const classId = this.selectedClass;
    this.act(async () => {
      const id = this.requireSession();
      const resp = await this.client.pixelHint(id, x, y, classId);
      this.view = applyHintResponse(this.view, resp);
      await this.refreshHistory(id);
    });
  }

  private suggest(): void {
    this.act(async () => {
      const id = this.requireSession();
      const s = await this.client.suggestPixel(id);
      this.view = setSuggested(this.view, {
        x: s.x,
        y: s.y,
        margin: s.margin,
      });
    });
  }

  private reset(): void {
    this.act(async () => {
      const id = this.requireSession();
      const resp = await this.client.reset(id);
      this.view = applyReset(this.view, resp);
    });
  }

  private remove(): void {
    this.act(async () => {
      const id = this.requireSession();
      await this.client.deleteSession(id);
      this.view = emptyView();
    });
  }

  private setFlicker(): void {
    if (this.flickerTimer !== null) {
      window.clearInterval(this.flickerTimer);
      this.flickerTimer = null;
      this.flickerShowPrevious = false;
    }
    if (this.flickerToggle.checked) {
      this.flickerTimer = window.setInterval(() => {
        this.flickerShowPrevious = !this.flickerShowPrevious;
        this.render();
      }, 400);
    }
    this.render();
  }

  private renderLegend(): void {
    this.legendList.textContent = "";
    for (const entry of sortLegendForDisplay(this.view.legend)) {
      const item = document.createElement("button");
      item.type = "button";
      item.className =
        "legend-item" +
        (entry.class_id === this.selectedClass ? " selected" : "");
      const swatch = document.createElement("span");
      swatch.className = "swatch";
      swatch.style.backgroundColor = `rgb(${entry.color.join(",")})`;
      item.append(swatch, `${entry.name} (${entry.class_id})`);
      item.addEventListener("click", () => {
        this.selectedClass = entry.class_id;
        this.renderLegend();
      });
      this.legendList.append(item);
    }
  }

  private renderHistory(): void {
    this.historyList.textContent = "";
    for (const turn of this.view.history) {
      const li = document.createElement("li");
      const what =
        turn.kind === "text"
          ? `text "${String((turn.payload as { text?: string }).text ?? "")}"`
          : `pixel (${String((turn.payload as { x?: number }).x)}, ` +
            `${String((turn.payload as { y?: number }).y)}) -> class ` +
            `${String((turn.payload as { class_id?: number }).class_id)}`;
      const score =
        turn.miou === null ? "" : ` mIoU ${turn.miou.toFixed(4)}`;
      li.textContent =
        `${what} — ${turn.changed_pixels} px changed${score}` +
        (turn.noop ? " [no-op]" : "");
      this.historyList.append(li);
    }
  }

  private drawLabels(
    canvas: HTMLCanvasElement,
    buffer: Uint8ClampedArray,
  ): void {
    const { width, height } = this.view;
    canvas.width = width;
    canvas.height = height;
    canvas.style.width = `${width * SCALE}px`;
    canvas.style.height = `${height * SCALE}px`;
    const ctx = canvas.getContext("2d");
    if (!ctx) return;
    const pixels = buffer as Uint8ClampedArray<ArrayBuffer>;
    ctx.putImageData(new ImageData(pixels, width, height), 0, 0);
  }

  private render(): void {
    this.view = { ...this.view, pending: this.queue.busy };
    const { view } = this;

    this.errorBox.textContent = view.error ?? "";
    this.errorBox.style.display = view.error ? "block" : "none";

    const score = view.miou === null ? "n/a" : view.miou.toFixed(4);
    const changed =
      view.lastChanged === null ? "" : ` | changed pixels: ${view.lastChanged}`;
    this.statusLine.textContent = view.sessionId
      ? `session ${view.sessionId.slice(0, 8)} | mIoU ${score}${changed}` +
        (view.pending ? " | working…" : "")
      : "no session";

    for (const button of document.querySelectorAll("button, input")) {
      if (button.id !== "api-base" && button.id !== "file-input") {
        (button as HTMLButtonElement).disabled = view.pending;
      }
    }

    if (view.baseImageUrl) {
      const img = new Image();
      img.onload = () => {
        this.baseCanvas.width = view.width;
        this.baseCanvas.height = view.height;
        this.baseCanvas.style.width = `${view.width * SCALE}px`;
        this.baseCanvas.style.height = `${view.height * SCALE}px`;
        this.baseCanvas
          .getContext("2d")
          ?.drawImage(img, 0, 0, view.width, view.height);
      };
      img.src = view.baseImageUrl;
    }

    if (view.currentLabels) {
      const labels =
        this.flickerShowPrevious && view.previousLabels
          ? view.previousLabels
          : view.currentLabels;
      this.drawLabels(
        this.overlayCanvas,
        overlayRGBA(labels, view.legend, view.overlayOpacity),
      );
      if (view.previousLabels) {
        this.drawLabels(
          this.diffCanvas,
          changedOutline(
            view.previousLabels,
            view.currentLabels,
            view.width,
            view.height,
          ),
        );
        this.diffCanvas.style.display = "block";
      } else {
        this.diffCanvas.style.display = "none";
      }
    }

    if (view.heatmapB64 && view.heatmapVisible) {
      this.heatmapImg.src = heatmapUrl(view.heatmapB64);
      this.heatmapImg.style.width = `${view.width * SCALE}px`;
      this.heatmapImg.style.height = `${view.height * SCALE}px`;
      this.heatmapImg.style.display = "block";
    } else {
      this.heatmapImg.style.display = "none";
    }

    if (view.suggested) {
      this.marker.style.display = "block";
      this.marker.style.left = `${(view.suggested.x + 0.5) * SCALE}px`;
      this.marker.style.top = `${(view.suggested.y + 0.5) * SCALE}px`;
      this.marker.title = `margin ${view.suggested.margin.toFixed(4)}`;
    } else {
      this.marker.style.display = "none";
    }

    this.renderLegend();
    this.renderHistory();
  }
}

new App();

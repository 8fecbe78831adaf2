/** Page wiring: controls on the left, live view on the right.
 *
 * Control flow: slider/stepper/reference edits debounce into the controller;
 * seed and sample-count edits wait for the explicit regenerate button so a
 * half-typed seed never triggers a refresh. Every accepted render refreshes
 * the shareable URL.
 */

import { ApiClient, ApiFailure } from "./api";
import { DEBOUNCE_MS, GenerationController, type RefreshResult } from "./controller";
import {
  MalformedResponse,
  renderView,
  sqrtDiff,
  toPixel,
  type PlotWindow,
  type ScatterView,
  type View,
} from "./render";
import {
  DEFAULT_ALPHA,
  MAX_ITERATIONS,
  clamp01,
  decodeQuery,
  defaultState,
  encodeQuery,
  type ReferenceChoice,
  type SessionState,
} from "./state";
import type { CheckpointDetail, ReferencePayload } from "./types";

interface Els {
  checkpoint: HTMLSelectElement;
  seed: HTMLInputElement;
  nSamples: HTMLInputElement;
  iterations: HTMLInputElement;
  sliders: HTMLDivElement;
  refNone: HTMLInputElement;
  refSample: HTMLInputElement;
  refUpload: HTMLInputElement;
  sampleId: HTMLInputElement;
  uploadFile: HTMLInputElement;
  refNote: HTMLSpanElement;
  regenerate: HTMLButtonElement;
  diffToggle: HTMLInputElement;
  diffLabel: HTMLLabelElement;
  banner: HTMLDivElement;
  bannerText: HTMLSpanElement;
  retry: HTMLButtonElement;
  view: HTMLDivElement;
  metric: HTMLSpanElement;
  status: HTMLSpanElement;
  share: HTMLButtonElement;
  shareNote: HTMLSpanElement;
}

const PLOT_SIZE = 440;

export class App {
  readonly state: SessionState = defaultState();
  private detail: CheckpointDetail | null = null;
  private els!: Els;
  private controller!: GenerationController;
  private lastResult: RefreshResult | null = null;
  private showDiff = false;
  private plotWindow: PlotWindow | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ApiClient,
    private readonly debounceMs: number = DEBOUNCE_MS,
  ) {}

  async start(initialQuery: string): Promise<void> {
    this.root.innerHTML = template();
    this.els = lookup(this.root);
    this.controller = new GenerationController(
      this.api,
      {
        onResult: (r) => this.accept(r),
        onFailure: (f, s) => this.fail(f, s),
        onBusy: (b) => this.setBusy(b),
      },
      this.debounceMs,
    );
    this.wire();

    const summaries = await this.api.listCheckpoints();
    this.els.checkpoint.innerHTML = "";
    for (const s of summaries) {
      const opt = document.createElement("option");
      opt.value = s.id;
      opt.textContent = `${s.id} (${s.kind}, phase ${s.phase}, ${s.n_modules} modules)`;
      this.els.checkpoint.appendChild(opt);
    }
    const fromQuery = new URLSearchParams(initialQuery).get("ckpt");
    const chosen =
      summaries.find((s) => s.id === fromQuery) ??
      summaries.find((s) => s.n_modules > 0) ??
      summaries[0];
    if (chosen === undefined) {
      this.banner("no checkpoints on the server; point the service at a checkpoint directory");
      return;
    }
    await this.selectCheckpoint(chosen.id, initialQuery);
  }

  /** Swap to a checkpoint: fetch its module list, rebuild sliders, refresh. */
  private async selectCheckpoint(id: string, query: string | null): Promise<void> {
    let detail: CheckpointDetail;
    try {
      detail = await this.api.describe(id);
    } catch (err) {
      this.banner(err instanceof ApiFailure ? err.message : String(err));
      return;
    }
    this.detail = detail;
    const names = detail.modules.map((m) => m.name);
    const decoded = query !== null ? decodeQuery(query, names) : null;
    const fresh = decoded !== null && decoded.checkpoint === id ? decoded : null;
    const next = fresh ?? defaultState();
    if (fresh === null) {
      for (const n of names) next.alphas[n] = detail.default_alpha ?? DEFAULT_ALPHA;
    }
    next.checkpoint = id;
    Object.assign(this.state, next);
    this.els.checkpoint.value = id;
    this.els.seed.value = String(this.state.seed);
    this.els.nSamples.value = String(this.state.nSamples);
    this.els.iterations.value = String(this.state.iterations);
    this.syncReferenceControls();
    this.buildSliders(names);
    this.els.diffLabel.hidden = detail.kind !== "images";
    this.controller.flush(this.state);
  }

  private buildSliders(names: string[]): void {
    this.els.sliders.innerHTML = "";
    if (names.length === 0) {
      const note = document.createElement("p");
      note.className = "hint";
      note.textContent = "phase-1 checkpoint: no feedback modules, gain has no effect";
      this.els.sliders.appendChild(note);
      return;
    }
    for (const name of names) {
      const row = document.createElement("div");
      row.className = "slider-row";
      const label = document.createElement("label");
      label.textContent = `α ${name}`;
      label.htmlFor = `alpha-${name}`;
      const slider = document.createElement("input");
      slider.type = "range";
      slider.id = `alpha-${name}`;
      slider.min = "0";
      slider.max = "1";
      slider.step = "0.01";
      slider.value = String(this.state.alphas[name] ?? DEFAULT_ALPHA);
      slider.className = "alpha-slider";
      const value = document.createElement("output");
      value.textContent = slider.value;
      slider.addEventListener("input", () => {
        const v = clamp01(Number(slider.value));
        this.state.alphas[name] = v;
        value.textContent = String(v);
        this.controller.change(this.state);
      });
      row.append(label, slider, value);
      this.els.sliders.appendChild(row);
    }
  }

  private wire(): void {
    this.els.checkpoint.addEventListener("change", () => {
      void this.selectCheckpoint(this.els.checkpoint.value, null);
    });
    this.els.regenerate.addEventListener("click", () => {
      this.state.seed = Math.max(0, Math.round(Number(this.els.seed.value) || 0));
      this.state.nSamples = Math.min(1024, Math.max(1, Math.round(Number(this.els.nSamples.value) || 256)));
      this.els.seed.value = String(this.state.seed);
      this.els.nSamples.value = String(this.state.nSamples);
      this.plotWindow = null; // new cloud, new framing
      this.controller.flush(this.state);
    });
    this.els.iterations.addEventListener("input", () => {
      const v = Math.min(MAX_ITERATIONS, Math.max(0, Math.round(Number(this.els.iterations.value) || 0)));
      this.state.iterations = v;
      this.els.iterations.value = String(v);
      this.controller.change(this.state);
    });
    const refChanged = () => {
      this.applyReferenceChoice();
      this.controller.change(this.state);
    };
    this.els.refNone.addEventListener("change", refChanged);
    this.els.refSample.addEventListener("change", refChanged);
    this.els.refUpload.addEventListener("change", refChanged);
    this.els.sampleId.addEventListener("input", () => {
      if (this.els.refSample.checked) refChanged();
    });
    this.els.uploadFile.addEventListener("change", () => {
      void this.readUpload().then((payload) => {
        if (payload !== null && this.els.refUpload.checked) {
          this.state.reference = { kind: "upload", payload };
          this.syncReferenceControls();
          this.controller.change(this.state);
        }
      });
    });
    this.els.diffToggle.addEventListener("change", () => {
      this.showDiff = this.els.diffToggle.checked;
      if (this.lastResult !== null) this.paint(this.lastResult);
    });
    this.els.retry.addEventListener("click", () => {
      this.els.banner.hidden = true;
      this.controller.flush(this.state);
    });
    this.els.share.addEventListener("click", () => {
      const encoded = encodeQuery(this.state);
      const url = `${location.origin}${location.pathname}?${encoded.query}`;
      const note = encoded.complete
        ? "link copied"
        : "link copied (uploaded reference too large for a link, receiver sees none)";
      if (navigator.clipboard !== undefined) {
        this.els.shareNote.textContent = note;
        void navigator.clipboard.writeText(url).catch(() => {
          this.els.shareNote.textContent = url;
        });
      } else {
        this.els.shareNote.textContent = url;
      }
    });
  }

  private applyReferenceChoice(): void {
    let ref: ReferenceChoice = { kind: "none" };
    if (this.els.refSample.checked) {
      const id = this.els.sampleId.value.trim();
      ref = id.length > 0 ? { kind: "sample", id } : { kind: "none" };
    } else if (this.els.refUpload.checked) {
      ref =
        this.state.reference.kind === "upload"
          ? this.state.reference
          : { kind: "none" };
    }
    this.state.reference = ref;
    this.syncReferenceControls();
  }

  private syncReferenceControls(): void {
    const ref = this.state.reference;
    if (ref.kind === "sample") {
      this.els.refSample.checked = true;
      this.els.sampleId.value = ref.id;
    } else if (ref.kind === "upload") {
      this.els.refUpload.checked = true;
    } else if (!this.els.refSample.checked && !this.els.refUpload.checked) {
      // keep a half-filled picker (e.g. sample radio with empty id) selected
      this.els.refNone.checked = true;
    }
    const kind = ref.kind;
    const locked = kind !== "none";
    this.els.iterations.disabled = locked;
    if (locked) {
      this.state.iterations = 1;
      this.els.iterations.value = "1";
      this.els.refNote.textContent = "reference active: single correction pass";
    } else {
      this.els.refNote.textContent = "";
    }
    this.els.sampleId.disabled = !this.els.refSample.checked;
    this.els.uploadFile.disabled = !this.els.refUpload.checked;
  }

  private async readUpload(): Promise<ReferencePayload | null> {
    const file = this.els.uploadFile.files?.[0];
    if (file === undefined) return null;
    try {
      if (file.type === "image/png") {
        const buf = new Uint8Array(await file.arrayBuffer());
        let bin = "";
        for (const b of buf) bin += String.fromCharCode(b);
        return { image_b64: btoa(bin) };
      }
      const parsed = JSON.parse(await file.text());
      const rows = Array.isArray(parsed) ? parsed : parsed?.points;
      if (!Array.isArray(rows)) throw new Error("expected a JSON array of [x, y] rows");
      return { points: rows as number[][] };
    } catch (err) {
      this.banner(`could not read reference file: ${String(err)}`);
      return null;
    }
  }

  // -- refresh lifecycle -----------------------------------------------------

  private accept(result: RefreshResult): void {
    this.lastResult = result;
    this.els.banner.hidden = true;
    this.paint(result);
    const encoded = encodeQuery(result.state);
    history.replaceState(null, "", `?${encoded.query}`);
  }

  private fail(failure: ApiFailure, _state: SessionState): void {
    this.banner(failure.message);
  }

  private banner(message: string): void {
    this.els.bannerText.textContent = message;
    this.els.banner.hidden = false;
  }

  private setBusy(busy: boolean): void {
    this.els.status.textContent = busy ? "generating…" : "";
  }

  private referencePoints(): number[][] | null {
    if (this.state.reference.kind === "upload" && this.state.reference.payload.points) {
      return this.state.reference.payload.points;
    }
    return null;
  }

  private paint(result: RefreshResult): void {
    let view: View;
    try {
      view = renderView(result.response, result.baseline, this.referencePoints());
    } catch (err) {
      if (err instanceof MalformedResponse) {
        this.banner(`malformed response: ${err.message}`);
        return;
      }
      throw err;
    }
    this.els.metric.textContent =
      view.metric !== null ? `distance to reference: ${view.metric.toFixed(6)}` : "";
    if (view.kind === "scatter") this.paintScatter(view);
    else this.paintGrid(view.baseline, view.corrected);
  }

  private paintScatter(view: ScatterView): void {
    if (this.plotWindow === null) {
      // Frame on the baseline cloud (stable across slider moves) plus any
      // reference points, with 10% margin.
      const pts = [...view.series[1].points, ...view.series[0].points];
      let m = 1e-6;
      for (const p of pts) m = Math.max(m, Math.abs(p[0] ?? 0), Math.abs(p[1] ?? 0));
      m *= 1.1;
      this.plotWindow = { xMin: -m, xMax: m, yMin: -m, yMax: m, width: PLOT_SIZE, height: PLOT_SIZE };
    }
    const w = this.plotWindow;
    this.els.view.innerHTML = "";
    const canvas = document.createElement("canvas");
    canvas.width = w.width;
    canvas.height = w.height;
    canvas.className = "scatter";
    const legend = document.createElement("div");
    legend.className = "legend";
    const colors = ["#8a8a8a", "#3b6ea5", "#d9662b"];
    view.series.forEach((s, i) => {
      const item = document.createElement("span");
      item.className = "legend-item";
      item.innerHTML = `<i style="background:${colors[i]}"></i>${s.label}${s.points.length === 0 ? " (none)" : ""}`;
      legend.appendChild(item);
    });
    this.els.view.append(legend, canvas);
    const ctx = canvas.getContext("2d");
    if (ctx === null) return;
    ctx.fillStyle = "#ffffff";
    ctx.fillRect(0, 0, w.width, w.height);
    view.series.forEach((s, i) => {
      ctx.fillStyle = colors[i] ?? "#000";
      for (const p of s.points) {
        const [px, py] = toPixel(p, w);
        ctx.beginPath();
        ctx.arc(px, py, 2.2, 0, Math.PI * 2);
        ctx.fill();
      }
    });
  }

  private paintGrid(baseline: string[], corrected: string[]): void {
    this.els.view.innerHTML = "";
    const grid = document.createElement("div");
    grid.className = "image-grid";
    const addRow = (label: string, images: string[]) => {
      const row = document.createElement("div");
      row.className = "image-row";
      const tag = document.createElement("span");
      tag.className = "row-label";
      tag.textContent = label;
      row.appendChild(tag);
      for (const b64 of images) {
        const img = document.createElement("img");
        img.src = `data:image/png;base64,${b64}`;
        img.className = "cell";
        row.appendChild(img);
      }
      grid.appendChild(row);
      return row;
    };
    addRow("baseline", baseline);
    addRow("corrected", corrected);
    if (this.showDiff) {
      const row = document.createElement("div");
      row.className = "image-row";
      const tag = document.createElement("span");
      tag.className = "row-label";
      tag.textContent = "√diff";
      row.appendChild(tag);
      const n = Math.min(baseline.length, corrected.length);
      for (let i = 0; i < n; i += 1) {
        row.appendChild(this.diffCell(baseline[i] ?? "", corrected[i] ?? ""));
      }
      grid.appendChild(row);
    }
    this.els.view.appendChild(grid);
  }

  private diffCell(b64a: string, b64b: string): HTMLCanvasElement {
    const canvas = document.createElement("canvas");
    canvas.className = "cell";
    const a = new Image();
    const b = new Image();
    let loaded = 0;
    const tryDraw = () => {
      loaded += 1;
      if (loaded < 2) return;
      canvas.width = a.naturalWidth;
      canvas.height = a.naturalHeight;
      const ctx = canvas.getContext("2d");
      if (ctx === null) return;
      const scratch = document.createElement("canvas");
      scratch.width = a.naturalWidth;
      scratch.height = a.naturalHeight;
      const sctx = scratch.getContext("2d");
      if (sctx === null) return;
      sctx.drawImage(a, 0, 0);
      const da = sctx.getImageData(0, 0, scratch.width, scratch.height);
      sctx.drawImage(b, 0, 0);
      const db = sctx.getImageData(0, 0, scratch.width, scratch.height);
      const out = ctx.createImageData(scratch.width, scratch.height);
      out.data.set(sqrtDiff(da.data, db.data));
      ctx.putImageData(out, 0, 0);
    };
    a.onload = tryDraw;
    b.onload = tryDraw;
    a.src = `data:image/png;base64,${b64a}`;
    b.src = `data:image/png;base64,${b64b}`;
    return canvas;
  }
}

function template(): string {
  return `
  <header>
    <h1>feedback-loop explorer</h1>
    <span id="status" class="status"></span>
    <span class="spacer"></span>
    <label>checkpoint <select id="checkpoint"></select></label>
    <button id="share" type="button">share link</button>
    <span id="share-note" class="hint"></span>
  </header>
  <div id="banner" class="banner" hidden>
    <span id="banner-text"></span>
    <button id="retry" type="button">retry</button>
  </div>
  <div class="layout">
    <section class="controls">
      <fieldset>
        <legend>sampling</legend>
        <label>seed <input id="seed" type="number" min="0" step="1" value="0"></label>
        <label>samples <input id="n-samples" type="number" min="1" max="1024" step="1" value="256"></label>
        <button id="regenerate" type="button">regenerate</button>
      </fieldset>
      <fieldset>
        <legend>correction</legend>
        <label>iterations <input id="iterations" type="number" min="0" max="${MAX_ITERATIONS}" step="1" value="1"></label>
        <div id="sliders"></div>
        <p class="hint">recommended gain band 0.1–0.2 is shaded on each slider</p>
      </fieldset>
      <fieldset>
        <legend>reference</legend>
        <label><input id="ref-none" type="radio" name="ref" checked> none</label>
        <label><input id="ref-sample" type="radio" name="ref"> generated sample id</label>
        <input id="sample-id" type="text" placeholder="trace id from a previous response" disabled>
        <label><input id="ref-upload" type="radio" name="ref"> uploaded payload</label>
        <input id="upload-file" type="file" accept=".json,image/png" disabled>
        <span id="ref-note" class="hint"></span>
      </fieldset>
      <label id="diff-label" hidden><input id="diff-toggle" type="checkbox"> per-pixel difference row</label>
    </section>
    <main id="view" class="view"></main>
  </div>
  <footer><span id="metric"></span></footer>
  `;
}

function lookup(root: HTMLElement): Els {
  const pick = <T extends HTMLElement>(id: string): T => {
    const el = root.querySelector<T>(`#${id}`);
    if (el === null) throw new Error(`missing element #${id}`);
    return el;
  };
  return {
    checkpoint: pick("checkpoint"),
    seed: pick("seed"),
    nSamples: pick("n-samples"),
    iterations: pick("iterations"),
    sliders: pick("sliders"),
    refNone: pick("ref-none"),
    refSample: pick("ref-sample"),
    refUpload: pick("ref-upload"),
    sampleId: pick("sample-id"),
    uploadFile: pick("upload-file"),
    refNote: pick("ref-note"),
    regenerate: pick("regenerate"),
    diffToggle: pick("diff-toggle"),
    diffLabel: pick("diff-label"),
    banner: pick("banner"),
    bannerText: pick("banner-text"),
    retry: pick("retry"),
    view: pick("view"),
    metric: pick("metric"),
    status: pick("status"),
    share: pick("share"),
    shareNote: pick("share-note"),
  };
}

export function mount(root: HTMLElement, api: ApiClient, debounceMs = DEBOUNCE_MS): App {
  const app = new App(root, api, debounceMs);
  void app.start(location.search).catch((err) => {
    root.textContent = `failed to start: ${String(err)}`;
  });
  return app;
}

const autoRoot = typeof document !== "undefined" ? document.getElementById("app") : null;
if (autoRoot !== null) {
  mount(autoRoot, new ApiClient(""));
}

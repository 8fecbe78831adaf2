/** Pure view-model construction from service responses, separated from the
 * canvas/DOM painters so tests can assert on the exact rendered data. */

import type { GenerateResponse } from "./types";

export class MalformedResponse extends Error {
  constructor(message: string) {
    super(message);
    this.name = "MalformedResponse";
  }
}

export interface ScatterSeries {
  label: string;
  points: number[][];
}

export interface ScatterView {
  kind: "scatter";
  /** Always three legend entries: reference, baseline, corrected. */
  series: [ScatterSeries, ScatterSeries, ScatterSeries];
  metric: number | null;
}

export interface GridView {
  kind: "grid";
  /** base64 PNG per sample, one row each. */
  baseline: string[];
  corrected: string[];
  metric: number | null;
}

export type View = ScatterView | GridView;

function isPointRows(outputs: unknown): outputs is number[][] {
  return (
    Array.isArray(outputs) &&
    outputs.every(
      (row) =>
        Array.isArray(row) && row.length === 2 && row.every((v) => typeof v === "number" && Number.isFinite(v)),
    )
  );
}

function isPngRows(outputs: unknown): outputs is string[] {
  return Array.isArray(outputs) && outputs.every((s) => typeof s === "string" && s.length > 0);
}

function checkShape(resp: GenerateResponse): "points" | "images" {
  if (typeof resp !== "object" || resp === null) {
    throw new MalformedResponse("response is not an object");
  }
  const kind = resp.metadata?.kind;
  if (kind !== "points" && kind !== "images") {
    throw new MalformedResponse(`unknown output kind ${JSON.stringify(kind)}`);
  }
  if (kind === "points" && !isPointRows(resp.outputs)) {
    throw new MalformedResponse("point outputs must be finite [x, y] rows");
  }
  if (kind === "images" && !isPngRows(resp.outputs)) {
    throw new MalformedResponse("image outputs must be base64 strings");
  }
  return kind;
}

/** Build the view model for one refresh: the corrected response, the matching
 * baseline (gain 0) response, and the active reference cloud if any. */
export function renderView(
  response: GenerateResponse,
  baseline: GenerateResponse,
  referencePoints: number[][] | null,
): View {
  const kind = checkShape(response);
  const baseKind = checkShape(baseline);
  if (kind !== baseKind) {
    throw new MalformedResponse(`baseline kind ${baseKind} does not match ${kind}`);
  }
  if (kind === "points") {
    return {
      kind: "scatter",
      series: [
        { label: "reference", points: referencePoints ?? [] },
        { label: "baseline (α=0)", points: baseline.outputs as number[][] },
        { label: "corrected", points: response.outputs as number[][] },
      ],
      metric: response.metric_vs_reference,
    };
  }
  return {
    kind: "grid",
    baseline: baseline.outputs as string[],
    corrected: response.outputs as string[],
    metric: response.metric_vs_reference,
  };
}

/** Per-pixel difference for the image toggle: square-root scaled absolute
 * difference so faint corrections stay visible, alpha forced opaque.
 * Operates on RGBA buffers of equal length; returns a new buffer. */
export function sqrtDiff(a: Uint8ClampedArray, b: Uint8ClampedArray): Uint8ClampedArray {
  if (a.length !== b.length) {
    throw new MalformedResponse(`pixel buffers differ in size (${a.length} vs ${b.length})`);
  }
  const out = new Uint8ClampedArray(a.length);
  for (let i = 0; i < a.length; i += 4) {
    for (let c = 0; c < 3; c += 1) {
      const d = Math.abs((a[i + c] ?? 0) - (b[i + c] ?? 0));
      out[i + c] = Math.round(Math.sqrt(d / 255) * 255);
    }
    out[i + 3] = 255;
  }
  return out;
}

/** Fixed plot window for the 2-D scatter: data units to pixel coordinates.
 * The swiss-roll cloud lives within a few units of the origin; a fixed
 * window keeps the view stable while sliders move points around. */
export interface PlotWindow {
  xMin: number;
  xMax: number;
  yMin: number;
  yMax: number;
  width: number;
  height: number;
}

export function toPixel(
  p: readonly number[],
  w: PlotWindow,
): [number, number] {
  const x = ((p[0] ?? 0) - w.xMin) / (w.xMax - w.xMin);
  const y = ((p[1] ?? 0) - w.yMin) / (w.yMax - w.yMin);
  return [x * w.width, (1 - y) * w.height];
}

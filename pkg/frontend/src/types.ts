/** Wire types for the generation service (JSON over HTTP). */

export interface CheckpointSummary {
  id: string;
  phase: number;
  kind: "points" | "images";
  n_modules: number;
}

export interface ModuleInfo {
  name: string;
  variant: string;
  binding: [string, string];
  disc_shape: number[];
  gen_shape: number[];
}

export interface CheckpointDetail extends CheckpointSummary {
  modules: ModuleInfo[];
  default_alpha: number;
}

/** Reference input: exactly one of the three fields is set. */
export interface ReferencePayload {
  points?: number[][];
  sample_id?: string;
  image_b64?: string;
}

export interface GenerateRequest {
  checkpoint_id: string;
  seed: number;
  n_samples: number;
  alpha_global: number;
  alpha_overrides?: Record<string, number>;
  iterations: number;
  reference?: ReferencePayload;
}

export interface GenerateResponse {
  /** Point rows for 2-D checkpoints, base64 PNG strings for image ones. */
  outputs: number[][] | string[];
  trace_ids: string[];
  metric_vs_reference: number | null;
  metadata: {
    checkpoint_id: string;
    kind: "points" | "images";
    phase: number;
    modules: string[];
    tap_shapes: Record<string, number[]>;
    default_alpha: number;
    seed: number;
  };
}

export interface ApiErrorBody {
  error: { field?: string; message?: string; id?: string };
}

/** Debounced generation engine: one logical refresh in flight at a time,
 * later control changes supersede earlier ones, stale results are dropped.
 *
 * A refresh fetches the baseline view (gain 0, cached per checkpoint/seed/
 * sample count) and then the corrected view, sequentially, so at most one
 * HTTP request is outstanding at any instant.
 */

import { ApiClient, ApiFailure } from "./api";
import {
  baselineKey,
  baselineRequest,
  buildRequest,
  type SessionState,
} from "./state";
import type { GenerateResponse } from "./types";

export const DEBOUNCE_MS = 150;

export interface RefreshResult {
  state: SessionState;
  response: GenerateResponse;
  baseline: GenerateResponse;
}

export interface ControllerHooks {
  onResult: (result: RefreshResult) => void;
  onFailure: (failure: ApiFailure, state: SessionState) => void;
  /** Optional: observe busy/idle transitions for a spinner. */
  onBusy?: (busy: boolean) => void;
}

function cloneState(state: SessionState): SessionState {
  return {
    ...state,
    alphas: { ...state.alphas },
    reference:
      state.reference.kind === "upload"
        ? { kind: "upload", payload: { ...state.reference.payload } }
        : { ...state.reference },
  };
}

export class GenerationController {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private ticket = 0;
  private running = false;
  private queued: SessionState | null = null;
  private readonly baselines = new Map<string, GenerateResponse>();

  constructor(
    private readonly api: ApiClient,
    private readonly hooks: ControllerHooks,
    private readonly debounceMs: number = DEBOUNCE_MS,
  ) {}

  /** Control changed: schedule a refresh after the debounce window. */
  change(state: SessionState): void {
    const snapshot = cloneState(state);
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      this.submit(snapshot);
    }, this.debounceMs);
  }

  /** Refresh immediately (regenerate button, retry affordance). */
  flush(state: SessionState): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    this.submit(cloneState(state));
  }

  /** True while a refresh chain is running. */
  get busy(): boolean {
    return this.running;
  }

  private submit(state: SessionState): void {
    if (this.running) {
      this.queued = state; // newest wins; intermediate states are skipped
      this.ticket += 1; // invalidate the running chain's render
      return;
    }
    void this.run(state);
  }

  private async run(state: SessionState): Promise<void> {
    this.running = true;
    this.hooks.onBusy?.(true);
    const ticket = ++this.ticket;
    try {
      const key = baselineKey(state);
      let baseline = this.baselines.get(key);
      if (baseline === undefined) {
        baseline = await this.api.generate(baselineRequest(state));
        this.baselines.set(key, baseline);
      }
      const response = await this.api.generate(buildRequest(state));
      if (ticket === this.ticket) {
        this.hooks.onResult({ state, response, baseline });
      }
    } catch (err) {
      if (ticket === this.ticket) {
        const failure =
          err instanceof ApiFailure
            ? err
            : new ApiFailure(String(err), null, null);
        this.hooks.onFailure(failure, state);
      }
    } finally {
      this.running = false;
      const next = this.queued;
      this.queued = null;
      if (next !== null) {
        void this.run(next);
      } else {
        this.hooks.onBusy?.(false);
      }
    }
  }
}

/** Thin typed client for the generation service. */

import type {
  ApiErrorBody,
  CheckpointDetail,
  CheckpointSummary,
  GenerateRequest,
  GenerateResponse,
} from "./types";

export class ApiFailure extends Error {
  constructor(
    message: string,
    readonly status: number | null,
    readonly field: string | null,
  ) {
    super(message);
    this.name = "ApiFailure";
  }
}

async function readError(res: Response): Promise<ApiFailure> {
  let message = `${res.status} ${res.statusText}`;
  let field: string | null = null;
  try {
    const body = (await res.json()) as ApiErrorBody;
    if (body.error) {
      field = body.error.field ?? null;
      message = body.error.message ?? (body.error.id ? `server error ${body.error.id}` : message);
    }
  } catch {
    // non-JSON error body: keep the status line
  }
  return new ApiFailure(message, res.status, field);
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async get<T>(path: string): Promise<T> {
    let res: Response;
    try {
      res = await this.fetchFn(this.base + path);
    } catch (err) {
      throw new ApiFailure(`network failure: ${String(err)}`, null, null);
    }
    if (!res.ok) throw await readError(res);
    return (await res.json()) as T;
  }

  health(): Promise<{ status: string; checkpoints: number }> {
    return this.get("/health");
  }

  listCheckpoints(): Promise<CheckpointSummary[]> {
    return this.get("/checkpoints");
  }

  describe(id: string): Promise<CheckpointDetail> {
    return this.get(`/checkpoints/${encodeURIComponent(id)}`);
  }

  async generate(req: GenerateRequest): Promise<GenerateResponse> {
    let res: Response;
    try {
      res = await this.fetchFn(this.base + "/generate", {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(req),
      });
    } catch (err) {
      throw new ApiFailure(`network failure: ${String(err)}`, null, null);
    }
    if (!res.ok) throw await readError(res);
    return (await res.json()) as GenerateResponse;
  }
}

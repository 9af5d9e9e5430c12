// Thin /v1 API client. The fetch implementation is injectable for tests.

import type {
  GenerationPayload,
  JobStatus,
  ProjectResponse,
  Scene,
  ValidateResponse,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public status: number,
    public body: unknown,
  ) {
    super(`API error ${status}: ${JSON.stringify(body)}`);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    const body = await resp.json();
    if (!resp.ok) throw new ApiError(resp.status, body);
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  health(): Promise<{ status: string; checkpoints: Record<string, string> }> {
    return this.request("/v1/health");
  }

  rig(): Promise<{ cameras: Scene["cameras"] }> {
    return this.request("/v1/rig");
  }

  validate(scene: Scene): Promise<ValidateResponse> {
    return this.post("/v1/scene/validate", scene);
  }

  project(scene: Scene): Promise<ProjectResponse> {
    return this.post("/v1/project", { scene });
  }

  submitGeneration(
    scene: Scene,
    seed: number,
    weather: string | null,
    cameras: string[] | null = null,
  ): Promise<{ job_id: string }> {
    return this.post("/v1/generate", { scene, seed, weather, cameras });
  }

  jobStatus(jobId: string): Promise<JobStatus> {
    return this.request(`/v1/jobs/${jobId}`);
  }

  /** Poll a generation job (1 s default) until done/failed. */
  async pollJob(
    jobId: string,
    intervalMs = 1000,
    maxPolls = 600,
    sleep: (ms: number) => Promise<void> = (ms) => new Promise((r) => setTimeout(r, ms)),
  ): Promise<GenerationPayload> {
    for (let i = 0; i < maxPolls; i++) {
      const status = await this.jobStatus(jobId);
      if (status.status === "done" && status.result) return status.result;
      if (status.status === "failed") throw new Error(status.error ?? "generation failed");
      await sleep(intervalMs);
    }
    throw new Error(`job ${jobId} did not finish within ${maxPolls} polls`);
  }
}

/** Debounce helper for validate-on-edit (300 ms per the editor contract). */
export function debounce<A extends unknown[]>(fn: (...args: A) => void, waitMs = 300): (...args: A) => void {
  let timer: ReturnType<typeof setTimeout> | null = null;
  return (...args: A) => {
    if (timer !== null) clearTimeout(timer);
    timer = setTimeout(() => fn(...args), waitMs);
  };
}

/** Latest-wins guard for superseded in-flight requests. */
export class LatestWins {
  private counter = 0;

  next(): number {
    return ++this.counter;
  }

  isCurrent(id: number): boolean {
    return id === this.counter;
  }
}

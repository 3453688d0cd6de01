/** Typed client for the studio service HTTP API. */

export interface Health {
  status: string;
  species_count: number;
  part_count: number;
  view_count: number;
  checkpoint: string;
}

export interface SpeciesCard {
  id: number;
  name: string;
  thumbnail: string;
  thumbnail_url: string;
  parts: number[];
}

export interface Catalog {
  species: SpeciesCard[];
  part_roles: string[];
  part_count: number;
  view_names: string[];
}

export type Selection =
  | { kind: "species"; species_id: number }
  | { kind: "interpolate"; species_a: number; species_b: number; alpha: number }
  | { kind: "latent"; values: number[] }
  | { kind: "sample" };

export interface ComposeResponse {
  tokens_ref: string;
  url: string;
  latents: number[][];
  tokens_norm: number[];
}

export interface SampledPart {
  part: number;
  values: number[];
}

export interface GenerateParams {
  tokens_ref: string;
  cameras: number[];
  seed: number;
  guidance: number;
  steps: number;
  rescale: number;
  attention: boolean;
}

export interface GeneratedImage {
  camera: number;
  view_name: string;
  ref: string;
  url: string;
}

export interface AttentionMap {
  camera: number;
  part: number;
  part_role: string;
  ref: string;
  url: string;
}

export interface Provenance extends GenerateParams {
  format: string;
  version: number;
  checkpoint: string;
  image_refs: string[];
}

export interface GenerateResponse {
  images: GeneratedImage[];
  attention: AttentionMap[] | null;
  provenance: Provenance;
  provenance_ref: string;
}

export interface Lift3dConfig {
  steps: number;
  seed: number;
  guidance: number;
  lr: number;
}

export interface JobTicket {
  job_id: string;
  state: string;
}

export interface Job {
  job_id: string;
  kind: string;
  state: string;
  artifacts: Record<string, unknown> | null;
  error: string | null;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: unknown,
  ) {
    super(typeof detail === "string" ? detail : JSON.stringify(detail));
    this.name = "ApiError";
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface PollOptions {
  firstDelay?: number;
  maxDelay?: number;
  timeout?: number;
  onUpdate?: (job: Job) => void;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export class StudioClient {
  readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(base = "", fetchFn?: FetchLike) {
    this.base = base;
    // bound wrapper: browsers reject a bare `fetch` called off `window`
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let res: Response;
    try {
      res = await this.fetchFn(this.base + path, init);
    } catch (err) {
      throw new ApiError(0, `service unreachable: ${err}`);
    }
    if (!res.ok) {
      let detail: unknown = res.statusText;
      try {
        const body = (await res.json()) as { detail?: unknown };
        detail = body.detail ?? detail;
      } catch {
        // non-JSON error body, keep the status text
      }
      throw new ApiError(res.status, detail);
    }
    return res.json() as Promise<T>;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  health(): Promise<Health> {
    return this.request("/api/health");
  }

  catalog(): Promise<Catalog> {
    return this.request("/api/species");
  }

  compose(selections: Selection[], seed: number): Promise<ComposeResponse> {
    return this.post("/api/compose", { selections, seed });
  }

  async samplePart(part: number, seed: number): Promise<SampledPart> {
    const out = await this.post<{ latents: SampledPart[]; seed: number }>(
      "/api/sample",
      { parts: [part], seed },
    );
    return out.latents[0];
  }

  generate(params: GenerateParams): Promise<GenerateResponse> {
    return this.post("/api/generate", params);
  }

  lift3d(tokensRef: string, config: Lift3dConfig): Promise<JobTicket> {
    return this.post("/api/lift3d", { tokens_ref: tokensRef, config });
  }

  job(id: string): Promise<Job> {
    return this.request(`/api/jobs/${id}`);
  }

  artifactUrl(ref: string): string {
    return `${this.base}/api/artifacts/${ref}`;
  }

  async fetchArtifact(ref: string): Promise<Uint8Array> {
    const res = await this.fetchFn(this.artifactUrl(ref));
    if (!res.ok) throw new ApiError(res.status, `missing artifact ${ref}`);
    return new Uint8Array(await res.arrayBuffer());
  }

  /** Poll a job until it settles, backing off between probes. */
  async pollJob(id: string, opts: PollOptions = {}): Promise<Job> {
    const {
      firstDelay = 250,
      maxDelay = 2000,
      timeout = 15 * 60_000,
      onUpdate,
      sleep = defaultSleep,
    } = opts;
    const deadline = Date.now() + timeout;
    let delay = firstDelay;
    for (;;) {
      const job = await this.job(id);
      onUpdate?.(job);
      if (job.state === "done" || job.state === "failed") return job;
      if (Date.now() > deadline) throw new ApiError(0, `job ${id} timed out`);
      await sleep(delay);
      delay = Math.min(delay * 1.5, maxDelay);
    }
  }
}

/** What the app needs from the client; tests substitute canned implementations. */
export type StudioApi = Pick<
  StudioClient,
  | "base"
  | "health"
  | "catalog"
  | "compose"
  | "samplePart"
  | "generate"
  | "lift3d"
  | "job"
  | "artifactUrl"
  | "fetchArtifact"
  | "pollJob"
>;

/**
 * Client for the edit service's /v1 endpoints. All server interaction in
 * the studio flows through this module (the UI never touches other URLs).
 */

export interface JobProgress {
  done: number;
  total: number;
}

export interface JobStatus {
  id: string;
  state: "queued" | "running" | "done" | "failed";
  progress: JobProgress;
  error?: { stage: string; message: string };
  artifacts?: string[];
  refined_maps?: string[];
}

export interface EditSubmission {
  imagePng: Uint8Array;
  maskPng: Uint8Array;
  target: { x: number; y: number };
  category: string;
  config?: Record<string, unknown>;
}

export type FetchLike = typeof fetch;

function toBlobPart(bytes: Uint8Array): ArrayBuffer {
  return bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength) as ArrayBuffer;
}

export class EditServiceClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = fetch,
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  async submitEdit(sub: EditSubmission): Promise<string> {
    const form = new FormData();
    form.append("image", new Blob([toBlobPart(sub.imagePng)], { type: "image/png" }), "image.png");
    form.append("mask", new Blob([toBlobPart(sub.maskPng)], { type: "image/png" }), "mask.png");
    form.append("target", `${sub.target.x},${sub.target.y}`);
    form.append("category", sub.category);
    if (sub.config) form.append("config", JSON.stringify(sub.config));
    const resp = await this.fetchFn(this.url("/v1/edits"), { method: "POST", body: form });
    if (resp.status !== 202) {
      throw new Error(`submit failed: ${resp.status} ${await resp.text()}`);
    }
    const body = (await resp.json()) as { id: string };
    return body.id;
  }

  async getStatus(jobId: string): Promise<JobStatus> {
    const resp = await this.fetchFn(this.url(`/v1/edits/${jobId}`));
    if (!resp.ok) throw new Error(`status failed: ${resp.status}`);
    return (await resp.json()) as JobStatus;
  }

  /**
   * Poll until the job reaches a terminal state. Progress is re-checked for
   * monotonicity; a backward step means the server broke its contract.
   */
  async pollUntilDone(
    jobId: string,
    onProgress?: (p: JobProgress) => void,
    intervalMs = 1000,
    timeoutMs = 300_000,
  ): Promise<JobStatus> {
    const start = Date.now();
    let lastDone = -1;
    for (;;) {
      const status = await this.getStatus(jobId);
      if (status.progress.done < lastDone) {
        throw new Error("server progress went backwards");
      }
      lastDone = status.progress.done;
      onProgress?.(status.progress);
      if (status.state === "done" || status.state === "failed") return status;
      if (Date.now() - start > timeoutMs) throw new Error("polling timed out");
      await new Promise((r) => setTimeout(r, intervalMs));
    }
  }

  async fetchResult(jobId: string): Promise<Uint8Array> {
    const resp = await this.fetchFn(this.url(`/v1/edits/${jobId}/result`));
    if (!resp.ok) throw new Error(`result failed: ${resp.status}`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  async fetchArtifact(jobId: string, name: string): Promise<Uint8Array> {
    const resp = await this.fetchFn(this.url(`/v1/edits/${jobId}/artifacts/${name}`));
    if (!resp.ok) throw new Error(`artifact ${name} failed: ${resp.status}`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  /** Returns the mask PNG, or null when the segmenter is unavailable (503). */
  async segment(imagePng: Uint8Array, point: { x: number; y: number }): Promise<Uint8Array | null> {
    const form = new FormData();
    form.append("image", new Blob([toBlobPart(imagePng)], { type: "image/png" }), "image.png");
    form.append("point", `${point.x},${point.y}`);
    const resp = await this.fetchFn(this.url("/v1/segment"), { method: "POST", body: form });
    if (resp.status === 503) return null;
    if (!resp.ok) throw new Error(`segment failed: ${resp.status}`);
    return new Uint8Array(await resp.arrayBuffer());
  }
}

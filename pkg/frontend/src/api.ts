/**
 * Typed client for the workbench HTTP API. Every number shown in the UI
 * comes through here; the front-end computes nothing itself.
 */

import type { JobRecord, LabelRecord, ProjectInfo, TrainMetrics } from './types.js';

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: unknown,
    message?: string,
  ) {
    super(message ?? `HTTP ${status}: ${JSON.stringify(detail)}`);
  }

  /** Current server revision carried by a 409, if any. */
  get currentRevision(): number | null {
    if (typeof this.detail === 'object' && this.detail !== null && 'revision' in this.detail) {
      const value = (this.detail as { revision: unknown }).revision;
      return typeof value === 'number' ? value : null;
    }
    return null;
  }
}

export interface PngPayload {
  bytes: Uint8Array;
  revision: number;
}

export interface TrainOptions {
  kind?: string;
  use_deep?: boolean;
  j?: number | null;
  seed?: number;
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Copy bytes into a plain ArrayBuffer, the least ambiguous fetch body type. */
export function toArrayBuffer(bytes: Uint8Array): ArrayBuffer {
  const buffer = new ArrayBuffer(bytes.byteLength);
  new Uint8Array(buffer).set(bytes);
  return buffer;
}

export class WorkbenchClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let detail: unknown = null;
      try {
        detail = (await response.json()).detail;
      } catch {
        detail = await response.text().catch(() => null);
      }
      throw new ApiError(response.status, detail);
    }
    return response;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    return (await this.request(path, init)).json() as Promise<T>;
  }

  private async png(path: string): Promise<PngPayload> {
    const response = await this.request(path);
    const revision = Number(response.headers.get('X-Revision') ?? '-1');
    return { bytes: new Uint8Array(await response.arrayBuffer()), revision };
  }

  createProject(name: string, classCount: number, classNames?: string[]) {
    return this.json<{ id: string; revision: number }>('/projects', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({
        name,
        class_count: classCount,
        ...(classNames ? { class_names: classNames } : {}),
      }),
    });
  }

  getProject(id: string): Promise<ProjectInfo> {
    return this.json<ProjectInfo>(`/projects/${id}`);
  }

  uploadImage(id: string, png: Uint8Array, revision: number) {
    return this.json<{ revision: number; height: number; width: number }>(
      `/projects/${id}/image?revision=${revision}`,
      { method: 'POST', headers: { 'Content-Type': 'image/png' }, body: toArrayBuffer(png) },
    );
  }

  putLabels(id: string, revision: number, records: LabelRecord[], replace = false) {
    return this.json<{ revision: number; labelled_count: number }>(
      `/projects/${id}/labels`,
      {
        method: 'PUT',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({ revision, records, ...(replace ? { replace: true } : {}) }),
      },
    );
  }

  getLabels(id: string): Promise<PngPayload> {
    return this.png(`/projects/${id}/labels`);
  }

  train(id: string, revision: number, options: TrainOptions = {}) {
    return this.json<{ revision: number; metrics: TrainMetrics }>(
      `/projects/${id}/train`,
      {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({ revision, ...options }),
      },
    );
  }

  getSegmentation(id: string): Promise<PngPayload> {
    return this.png(`/projects/${id}/segmentation`);
  }

  getFeatureViz(id: string): Promise<PngPayload> {
    return this.png(`/projects/${id}/feature-viz`);
  }

  getJob(jobId: string): Promise<JobRecord> {
    return this.json<JobRecord>(`/jobs/${jobId}`);
  }

  /** Poll a job until done or error; rejects on error or timeout. */
  pollJob(jobId: string, intervalMs = 250, timeoutMs = 120_000): Promise<JobRecord> {
    const deadline = Date.now() + timeoutMs;
    return new Promise((resolve, reject) => {
      const tick = async () => {
        try {
          const job = await this.getJob(jobId);
          if (job.status === 'done') {
            resolve(job);
          } else if (job.status === 'error') {
            reject(new Error(job.error ?? 'job failed'));
          } else if (Date.now() > deadline) {
            reject(new Error(`job ${jobId} timed out`));
          } else {
            setTimeout(tick, intervalMs);
          }
        } catch (err) {
          reject(err);
        }
      };
      void tick();
    });
  }
}

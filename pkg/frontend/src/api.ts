/**
 * Typed client for the patch-generation service API. No request ever
 * leaves this module without consent === true.
 */

import type { JobConfig } from "./config.js";

export type JobStatusValue = "queued" | "running" | "done" | "failed";

export interface JobStatus {
  status: JobStatusValue;
  progress: number;
  error?: string;
}

export interface PatchEntry {
  index: number;
  url: string;
  metadata: {
    variant: string;
    lambda_tv: number;
    steps: number;
    seed: number;
    ensemble_ids: string[];
    final_loss: number;
    patch_side: number;
  };
}

export class ConsentRequiredError extends Error {
  constructor() {
    super("explicit consent is required before uploading a photo");
  }
}

export class JobNotFoundError extends Error {
  constructor(jobId: string) {
    super(`job ${jobId} not found (it may have expired)`);
  }
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function errorMessage(resp: Response): Promise<string> {
  try {
    const body = (await resp.json()) as { error?: string };
    if (body && typeof body.error === "string") return body.error;
  } catch {
    // fall through to the generic message
  }
  return `request failed with status ${resp.status}`;
}

export class ApiClient {
  constructor(private base: string = "") {}

  async submitJob(photo: Blob, config: JobConfig, consent: boolean): Promise<string> {
    if (consent !== true) throw new ConsentRequiredError();
    const form = new FormData();
    form.append("photo", photo, "photo.png");
    form.append("config", JSON.stringify(config));
    form.append("consent", "true");
    const resp = await fetch(`${this.base}/api/jobs`, { method: "POST", body: form });
    if (!resp.ok) throw new ApiError(resp.status, await errorMessage(resp));
    const body = (await resp.json()) as { job_id: string };
    return body.job_id;
  }

  async getStatus(jobId: string): Promise<JobStatus> {
    const resp = await fetch(`${this.base}/api/jobs/${jobId}`);
    if (resp.status === 404) throw new JobNotFoundError(jobId);
    if (!resp.ok) throw new ApiError(resp.status, await errorMessage(resp));
    return (await resp.json()) as JobStatus;
  }

  async getPatches(jobId: string): Promise<PatchEntry[]> {
    const resp = await fetch(`${this.base}/api/jobs/${jobId}/patches`);
    if (resp.status === 404) throw new JobNotFoundError(jobId);
    if (!resp.ok) throw new ApiError(resp.status, await errorMessage(resp));
    const body = (await resp.json()) as { patches: PatchEntry[] };
    return body.patches;
  }

  patchUrl(jobId: string, index: number): string {
    return `${this.base}/api/jobs/${jobId}/patches/${index}.png`;
  }

  async fetchPatchBytes(jobId: string, index: number): Promise<ArrayBuffer> {
    const resp = await fetch(this.patchUrl(jobId, index));
    if (!resp.ok) throw new ApiError(resp.status, await errorMessage(resp));
    return resp.arrayBuffer();
  }
}

/**
 * Job progress polling: every 2 s at first, backing off to 10 s for
 * long-running jobs. One in-flight poll per job.
 */

import { ApiClient, JobNotFoundError, JobStatus } from "./api.js";

export interface PollCallbacks {
  onUpdate(status: JobStatus): void;
  onDone(): void;
  onFailed(reason: string): void;
  onExpired(): void;
}

export interface PollOptions {
  intervalMs?: number;
  maxIntervalMs?: number;
  backoffFactor?: number;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export interface PollHandle {
  stop(): void;
  finished: Promise<void>;
}

export function pollJob(
  client: ApiClient,
  jobId: string,
  callbacks: PollCallbacks,
  options: PollOptions = {},
): PollHandle {
  const base = options.intervalMs ?? 2000;
  const max = options.maxIntervalMs ?? 10000;
  const factor = options.backoffFactor ?? 1.5;
  const sleep = options.sleep ?? defaultSleep;
  let stopped = false;

  const finished = (async () => {
    let interval = base;
    while (!stopped) {
      let status: JobStatus;
      try {
        status = await client.getStatus(jobId);
      } catch (err) {
        if (err instanceof JobNotFoundError) {
          callbacks.onExpired();
          return;
        }
        throw err;
      }
      callbacks.onUpdate(status);
      if (status.status === "done") {
        callbacks.onDone();
        return;
      }
      if (status.status === "failed") {
        callbacks.onFailed(status.error ?? "job failed");
        return;
      }
      await sleep(interval);
      interval = Math.min(max, interval * factor);
    }
  })();

  return {
    stop() {
      stopped = true;
    },
    finished,
  };
}

"""Background workers: claim queued jobs, run patch generation with progress
reporting, and finalize job state.
"""

from __future__ import annotations

import logging
import threading
import time
from typing import Callable, Optional

from ..embedders import EmbedderRegistry, load_ensemble
from ..optimizer import generate_patch_set
from ..types import load_image
from .store import Job, JobStore

log = logging.getLogger(__name__)

LEASE_SECONDS = 120.0
POLL_INTERVAL = 0.05


class Worker:
    def __init__(self, store: JobStore, registry: EmbedderRegistry, worker_id: str,
                 lease_seconds: float = LEASE_SECONDS, poll_interval: float = POLL_INTERVAL):
        self.store = store
        self.registry = registry
        self.worker_id = worker_id
        self.lease_seconds = lease_seconds
        self.poll_interval = poll_interval
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "Worker":
        self._thread = threading.Thread(target=self._loop, name=self.worker_id, daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float = 30.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=timeout)

    def _loop(self) -> None:
        while not self._stop.is_set():
            self.store.requeue_expired()
            job = self.store.claim_next(self.worker_id, self.lease_seconds)
            if job is None:
                self._stop.wait(self.poll_interval)
                continue
            self._execute(job)

    def _execute(self, job: Job) -> None:
        cfg = job.config
        total_steps = max(1, cfg.steps) * job.count
        last_write = [0.0]

        def progress(run_idx: int, step: int, steps: int) -> None:
            done = run_idx * max(1, cfg.steps) + step
            now = time.monotonic()
            # throttle state writes; always record run/job completion
            if step == steps or now - last_write[0] >= 0.25:
                last_write[0] = now
                self.store.report_progress(job.id, done / total_steps, self.lease_seconds)

        try:
            photo = load_image(self.store.input_path(job.id))
            ensemble = load_ensemble(cfg.ensemble_ids, self.registry)
            patches = generate_patch_set(photo, ensemble, cfg, count=job.count, progress=progress)
            self.store.complete(job.id, patches)
            log.info("job %s done", job.id)
        except Exception as e:  # any failure lands in job state with its reason
            log.exception("job %s failed", job.id)
            try:
                self.store.fail(job.id, f"{type(e).__name__}: {e}")
            except Exception:
                log.exception("job %s: could not record failure", job.id)


class WorkerPool:
    def __init__(self, store: JobStore, registry: EmbedderRegistry, size: int = 1,
                 lease_seconds: float = LEASE_SECONDS):
        self.workers = [Worker(store, registry, worker_id=f"worker-{i}", lease_seconds=lease_seconds)
                        for i in range(size)]

    def start(self) -> "WorkerPool":
        for w in self.workers:
            w.start()
        return self

    def stop(self) -> None:
        for w in self.workers:
            w._stop.set()
        for w in self.workers:
            w.stop()

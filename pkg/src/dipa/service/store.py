"""Filesystem-backed job store with atomic state transitions and leases.

Layout: <root>/<job id>/{job.json, input.png, patches/patch_<k>.png,
patches/patch_<k>.json}. job.json is written via write-then-rename so a
crash never leaves a torn state file. Workers hold a lease on running jobs;
expired leases return the job to the queue.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional

from ..types import AttackConfig, ImageTensor, Patch, ValidationError, export_patch, save_image

STATUS_QUEUED = "queued"
STATUS_RUNNING = "running"
STATUS_DONE = "done"
STATUS_FAILED = "failed"
_TRANSITIONS = {
    STATUS_QUEUED: {STATUS_RUNNING},
    STATUS_RUNNING: {STATUS_DONE, STATUS_FAILED, STATUS_QUEUED},  # queued = lease expiry
    STATUS_DONE: set(),
    STATUS_FAILED: set(),
}


class ConsentRequiredError(ValidationError):
    """Submission without explicit consent; nothing is persisted."""


class JobNotFoundError(KeyError):
    pass


class InvalidTransitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Job:
    id: str
    status: str
    progress: float
    config: AttackConfig
    count: int
    consent: bool
    retain_input: bool
    created_at: float
    seq: int
    started_at: Optional[float] = None
    finished_at: Optional[float] = None
    failure_reason: Optional[str] = None
    worker_id: Optional[str] = None
    lease_expires_at: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "status": self.status,
            "progress": self.progress,
            "config": self.config.to_dict(),
            "count": self.count,
            "consent": self.consent,
            "retain_input": self.retain_input,
            "created_at": self.created_at,
            "seq": self.seq,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "failure_reason": self.failure_reason,
            "worker_id": self.worker_id,
            "lease_expires_at": self.lease_expires_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Job":
        d = dict(d)
        d["config"] = AttackConfig.from_dict(d["config"])
        return cls(**d)


class JobStore:
    """Single-node store; claim/transition operations are serialized by an
    in-process lock, and on-disk state survives restarts.
    """

    def __init__(self, root, clock: Callable[[], float] = time.time):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self._lock = threading.Lock()
        self._seq = max((j.seq for j in self.list_jobs()), default=-1) + 1

    # -- paths ------------------------------------------------------------

    def _dir(self, job_id: str) -> Path:
        return self.root / job_id

    def _job_file(self, job_id: str) -> Path:
        return self._dir(job_id) / "job.json"

    def input_path(self, job_id: str) -> Path:
        return self._dir(job_id) / "input.png"

    def patches_dir(self, job_id: str) -> Path:
        return self._dir(job_id) / "patches"

    def patch_paths(self, job_id: str) -> List[dict]:
        pdir = self.patches_dir(job_id)
        out = []
        k = 0
        while (pdir / f"patch_{k}.png").exists():
            out.append({"index": k, "png": pdir / f"patch_{k}.png", "json": pdir / f"patch_{k}.json"})
            k += 1
        return out

    # -- persistence ------------------------------------------------------

    def _write(self, job: Job) -> None:
        path = self._job_file(job.id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(job.to_dict(), sort_keys=True, indent=2))
        os.replace(tmp, path)

    def get(self, job_id: str) -> Job:
        path = self._job_file(job_id)
        if not path.exists():
            raise JobNotFoundError(job_id)
        return Job.from_dict(json.loads(path.read_text()))

    def list_jobs(self) -> List[Job]:
        jobs = []
        if not self.root.exists():
            return jobs
        for d in self.root.iterdir():
            f = d / "job.json"
            if f.exists():
                jobs.append(Job.from_dict(json.loads(f.read_text())))
        return sorted(jobs, key=lambda j: (j.created_at, j.seq))

    # -- lifecycle --------------------------------------------------------

    def submit(self, photo: ImageTensor, config: AttackConfig, count: int,
               consent: bool, retain_input: Optional[bool] = None) -> Job:
        if not consent:
            raise ConsentRequiredError("explicit consent is required to process the photo")
        if count < 1:
            raise ValidationError("count must be >= 1")
        with self._lock:
            job = Job(
                id=secrets.token_hex(16),
                status=STATUS_QUEUED,
                progress=0.0,
                config=config,
                count=count,
                consent=True,
                retain_input=bool(retain_input),
                created_at=self.clock(),
                seq=self._seq,
            )
            self._seq += 1
            self._dir(job.id).mkdir(parents=True)
            save_image(photo, self.input_path(job.id))
            self._write(job)
            return job

    def _transition(self, job: Job, new_status: str) -> None:
        if new_status not in _TRANSITIONS[job.status]:
            raise InvalidTransitionError(f"job {job.id}: cannot go {job.status} -> {new_status}")

    def claim_next(self, worker_id: str, lease_seconds: float) -> Optional[Job]:
        with self._lock:
            queued = [j for j in self.list_jobs() if j.status == STATUS_QUEUED]
            if not queued:
                return None
            job = queued[0]
            self._transition(job, STATUS_RUNNING)
            job = replace(job, status=STATUS_RUNNING, worker_id=worker_id,
                          started_at=self.clock(),
                          lease_expires_at=self.clock() + lease_seconds)
            self._write(job)
            return job

    def report_progress(self, job_id: str, progress: float, lease_seconds: float) -> None:
        with self._lock:
            job = self.get(job_id)
            if job.status != STATUS_RUNNING:
                raise InvalidTransitionError(f"job {job_id} is {job.status}, not running")
            self._write(replace(job, progress=min(max(progress, 0.0), 1.0),
                                lease_expires_at=self.clock() + lease_seconds))

    def complete(self, job_id: str, patches: List[Patch]) -> Job:
        with self._lock:
            job = self.get(job_id)
            self._transition(job, STATUS_DONE)
            pdir = self.patches_dir(job_id)
            pdir.mkdir(exist_ok=True)
            for k, patch in enumerate(patches):
                export_patch(patch, pdir / f"patch_{k}.png", pdir / f"patch_{k}.json")
            job = replace(job, status=STATUS_DONE, progress=1.0,
                          finished_at=self.clock(), worker_id=None, lease_expires_at=None)
            self._write(job)
            if not job.retain_input:
                self.input_path(job_id).unlink(missing_ok=True)
            return job

    def fail(self, job_id: str, reason: str) -> Job:
        with self._lock:
            job = self.get(job_id)
            self._transition(job, STATUS_FAILED)
            job = replace(job, status=STATUS_FAILED, failure_reason=reason,
                          finished_at=self.clock(), worker_id=None, lease_expires_at=None)
            self._write(job)
            if not job.retain_input:
                self.input_path(job_id).unlink(missing_ok=True)
            return job

    def requeue_expired(self) -> List[str]:
        """Return running jobs with expired leases to the queue."""
        requeued = []
        with self._lock:
            now = self.clock()
            for job in self.list_jobs():
                if job.status == STATUS_RUNNING and job.lease_expires_at is not None \
                        and job.lease_expires_at < now:
                    self._write(replace(job, status=STATUS_QUEUED, progress=0.0,
                                        worker_id=None, lease_expires_at=None, started_at=None))
                    requeued.append(job.id)
        return requeued

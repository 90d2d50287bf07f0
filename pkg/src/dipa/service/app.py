"""HTTP job service: photo upload with consent, asynchronous patch
generation, and result retrieval.
"""

from __future__ import annotations

import io
import json
import logging
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, File, Form, UploadFile
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image, UnidentifiedImageError

from ..embedders import EmbedderRegistry, default_registry
from ..types import AttackConfig, ValidationError, default_attack_config, validate_image
from .config import ServiceConfig
from .store import STATUS_DONE, ConsentRequiredError, JobNotFoundError, JobStore
from .worker import WorkerPool

log = logging.getLogger(__name__)

# config keys a client may set when submitting a job
SUBMITTABLE_KEYS = {"variant", "lambda_tv", "steps", "patch_side", "count", "seed"}


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def build_job_config(raw: dict, service: ServiceConfig) -> tuple[AttackConfig, int]:
    unknown = set(raw) - SUBMITTABLE_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    count = int(raw.get("count", 5))
    overrides = {k: raw[k] for k in raw if k not in ("count", "variant")}
    cfg = default_attack_config(
        variant=raw.get("variant", "dipa"),
        ensemble_ids=service.ensemble_ids,
        **overrides,
    )
    return cfg, count


def create_app(config: Optional[ServiceConfig] = None,
               registry: Optional[EmbedderRegistry] = None,
               start_workers: bool = True) -> FastAPI:
    config = config or ServiceConfig()
    if registry is None:
        registry = (EmbedderRegistry.from_manifest(config.manifest)
                    if config.manifest else default_registry())
    store = JobStore(config.job_dir)
    pool = WorkerPool(store, registry, size=config.workers)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if start_workers:
            store.requeue_expired()
            pool.start()
        yield
        if start_workers:
            pool.stop()

    app = FastAPI(title="dipa patch service", lifespan=lifespan)
    app.state.store = store
    app.state.pool = pool
    app.state.config = config

    @app.get("/api/health")
    async def health():
        return {"status": "ok"}

    @app.post("/api/jobs", status_code=202)
    async def submit_job(photo: UploadFile = File(...),
                         config_json: Optional[str] = Form(None, alias="config"),
                         consent: str = Form("false")):
        if consent.strip().lower() != "true":
            return _error(400, "explicit consent is required (send consent=true)")
        raw = await photo.read()
        if len(raw) > config.max_upload_bytes:
            return _error(413, f"upload exceeds {config.max_upload_bytes} bytes")
        try:
            with Image.open(io.BytesIO(raw)) as im:
                if im.mode != "RGB":
                    return _error(400, f"expected an RGB image, got mode {im.mode!r}")
                arr = np.asarray(im, dtype=np.uint8)
            image = validate_image(arr)
        except (UnidentifiedImageError, OSError, ValidationError) as e:
            return _error(400, f"cannot decode photo: {e}")
        try:
            cfg_raw = json.loads(config_json) if config_json else {}
            if not isinstance(cfg_raw, dict):
                raise ValidationError("config must be a JSON object")
            cfg, count = build_job_config(cfg_raw, config)
        except (ValidationError, ValueError, TypeError) as e:
            return _error(400, f"invalid config: {e}")
        try:
            job = store.submit(image, cfg, count=count, consent=True,
                               retain_input=config.retain_inputs)
        except ConsentRequiredError as e:
            return _error(400, str(e))
        return {"job_id": job.id}

    @app.get("/api/jobs/{job_id}")
    async def job_status(job_id: str):
        try:
            job = store.get(job_id)
        except JobNotFoundError:
            return _error(404, f"unknown job {job_id}")
        body = {"status": job.status, "progress": job.progress}
        if job.failure_reason:
            body["error"] = job.failure_reason
        return body

    @app.get("/api/jobs/{job_id}/patches")
    async def job_patches(job_id: str):
        try:
            job = store.get(job_id)
        except JobNotFoundError:
            return _error(404, f"unknown job {job_id}")
        if job.status != STATUS_DONE:
            return _error(409, f"job is {job.status}, results are available once done")
        patches = []
        for entry in store.patch_paths(job_id):
            metadata = json.loads(Path(entry["json"]).read_text())
            patches.append({
                "index": entry["index"],
                "url": f"/api/jobs/{job_id}/patches/{entry['index']}.png",
                "metadata": metadata,
            })
        return {"patches": patches}

    @app.get("/api/jobs/{job_id}/patches/{k}.png")
    async def job_patch_image(job_id: str, k: int):
        try:
            job = store.get(job_id)
        except JobNotFoundError:
            return _error(404, f"unknown job {job_id}")
        if job.status != STATUS_DONE:
            return _error(409, f"job is {job.status}, results are available once done")
        path = store.patches_dir(job_id) / f"patch_{k}.png"
        if not path.exists():
            return _error(404, f"no patch {k} for job {job_id}")
        return FileResponse(path, media_type="image/png")

    if config.static_dir and Path(config.static_dir).is_dir():
        app.mount("/", StaticFiles(directory=config.static_dir, html=True), name="ui")

    return app

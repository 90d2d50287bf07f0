"""Service configuration from a JSON file with environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from ..embedders import DEFAULT_ENSEMBLE_IDS

ENV_PREFIX = "DIPA_"


@dataclass(frozen=True)
class ServiceConfig:
    port: int = 8080
    workers: int = 1
    job_dir: str = "jobs"
    max_upload_bytes: int = 8 * 1024 * 1024
    retain_inputs: bool = False
    ensemble_ids: tuple = DEFAULT_ENSEMBLE_IDS
    manifest: Optional[str] = None  # embedder manifest path; builtin registry when None
    static_dir: Optional[str] = None  # UI bundle to serve at /

    @classmethod
    def load(cls, path=None, env: Optional[Mapping[str, str]] = None) -> "ServiceConfig":
        values: dict = {}
        if path is not None:
            values.update(json.loads(Path(path).read_text()))
        env = os.environ if env is None else env

        def override(key, cast):
            raw = env.get(ENV_PREFIX + key.upper())
            if raw is not None:
                values[key] = cast(raw)

        override("port", int)
        override("workers", int)
        override("job_dir", str)
        override("max_upload_bytes", int)
        override("retain_inputs", lambda s: s.lower() in ("1", "true", "yes"))
        override("ensemble_ids", lambda s: tuple(x.strip() for x in s.split(",") if x.strip()))
        override("manifest", str)
        override("static_dir", str)
        if "ensemble_ids" in values:
            values["ensemble_ids"] = tuple(values["ensemble_ids"])
        return cls(**values)

from .app import create_app
from .config import ServiceConfig
from .store import (
    ConsentRequiredError,
    InvalidTransitionError,
    Job,
    JobNotFoundError,
    JobStore,
    STATUS_DONE,
    STATUS_FAILED,
    STATUS_QUEUED,
    STATUS_RUNNING,
)
from .worker import Worker, WorkerPool

__all__ = [
    "create_app",
    "ServiceConfig",
    "ConsentRequiredError",
    "InvalidTransitionError",
    "Job",
    "JobNotFoundError",
    "JobStore",
    "STATUS_DONE",
    "STATUS_FAILED",
    "STATUS_QUEUED",
    "STATUS_RUNNING",
    "Worker",
    "WorkerPool",
]

"""Shared domain types: images, patches, placements, configs, trial records.

All array payloads are float64 numpy arrays with values in [0, 1], HWC layout.
Instances are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

VARIANT_DIPA = "dipa"
VARIANT_DIPA_TV = "dipa-tv"
VARIANTS = (VARIANT_DIPA, VARIANT_DIPA_TV)

# Sentinel identity for "no face detected" outcomes (predicted_identity=None
# in memory, this string on the wire / in logs).
NONE_IDENTITY = "NONE"


class ValidationError(ValueError):
    """Raised when an input violates a domain-type invariant."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageTensor:
    """H x W x 3 image with unit-interval linear intensities."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        _require(isinstance(d, np.ndarray) and d.ndim == 3, "image must be an HxWx3 array")
        _require(d.shape[2] == 3, f"image must have 3 channels, got {d.shape[2]}")
        _require(d.shape[0] >= 1 and d.shape[1] >= 1, "image must be at least 1x1")
        _require(d.dtype == np.float64, "image data must be float64")
        _require(bool(np.isfinite(d).all()), "image contains non-finite values")
        _require(bool((d >= 0.0).all() and (d <= 1.0).all()), "image values must lie in [0, 1]")
        d.flags.writeable = False

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape


def validate_image(raw) -> ImageTensor:
    """Normalize a decoded RGB raster into an ImageTensor.

    Accepts uint8 (scaled by 255), uint16 (scaled by 65535), float arrays
    already inside [0, 1], or an existing ImageTensor (returned unchanged).
    """
    if isinstance(raw, ImageTensor):
        return raw
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an RGB raster of shape HxWx3, got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError("zero-sized image")
    if arr.dtype == np.uint8:
        data = arr.astype(np.float64) / 255.0
    elif arr.dtype == np.uint16:
        data = arr.astype(np.float64) / 65535.0
    elif np.issubdtype(arr.dtype, np.floating):
        data = arr.astype(np.float64)
        if not np.isfinite(data).all():
            raise ValidationError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValidationError("float image values must already lie in [0, 1]")
    else:
        raise ValidationError(f"unsupported raster dtype {arr.dtype}")
    return ImageTensor(data=data)


def load_image(path) -> ImageTensor:
    """Decode an image file into an ImageTensor. Non-RGB files are rejected."""
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ValidationError(f"expected an RGB image, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise ValidationError(f"cannot decode image {path}: {e}") from e
    return validate_image(arr)


def to_uint8(data: np.ndarray) -> np.ndarray:
    """Quantize unit-interval intensities to 8 bit by round(v * 255)."""
    return np.clip(np.rint(np.asarray(data) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: ImageTensor, path) -> None:
    Image.fromarray(to_uint8(img.data), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Placement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Jitter:
    """Symmetric uniform sampling ranges for placement parameters."""

    dx: float = 0.0
    dy: float = 0.0
    dscale: float = 0.0
    drot: float = 0.0  # degrees

    def __post_init__(self):
        for name in ("dx", "dy", "dscale", "drot"):
            _require(getattr(self, name) >= 0.0, f"jitter {name} must be nonnegative")

    def to_dict(self) -> dict:
        return {"dx": self.dx, "dy": self.dy, "dscale": self.dscale, "drot": self.drot}

    @classmethod
    def from_dict(cls, d: dict) -> "Jitter":
        return cls(**d)


@dataclass(frozen=True)
class Placement:
    """Geometric rule mapping a patch into a face image.

    center_x/center_y are normalized coordinates of the patch center; scale is
    the patch side as a fraction of min(H, W).
    """

    center_x: float = 0.5
    center_y: float = 0.78
    scale: float = 0.35
    rotation_deg: float = 0.0
    jitter: Jitter = field(default_factory=Jitter)

    def __post_init__(self):
        _require(0.0 < self.scale <= 1.0, "scale must lie in (0, 1]")
        _require(0.0 <= self.center_x <= 1.0, "center_x must lie in [0, 1]")
        _require(0.0 <= self.center_y <= 1.0, "center_y must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "center_x": self.center_x,
            "center_y": self.center_y,
            "scale": self.scale,
            "rotation_deg": self.rotation_deg,
            "jitter": self.jitter.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        d = dict(d)
        d["jitter"] = Jitter.from_dict(d.get("jitter", {}))
        return cls(**d)


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Embedding:
    """Unit-norm d-vector produced by a face embedder."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        _require(d.ndim == 1 and d.shape[0] >= 2, "embedding must be a 1-D vector, dim >= 2")
        norm = float(np.linalg.norm(d))
        _require(abs(norm - 1.0) <= 1e-6, f"embedding must be unit norm, got {norm}")
        object.__setattr__(self, "data", d)
        d.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# Attack configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackConfig:
    variant: str = VARIANT_DIPA
    lambda_tv: float = 0.0
    steps: int = 1000
    step_size: float = 0.01
    patch_side: int = 448
    pool_kernel: int = 7
    pool_stride: int = 1
    placement: Placement = field(default_factory=Placement)
    jitter_samples: int = 4
    ensemble_ids: tuple = ()
    seed: int = 0

    def __post_init__(self):
        _require(self.variant in VARIANTS, f"unknown variant {self.variant!r}")
        _require(self.lambda_tv >= 0.0, "lambda_tv must be nonnegative")
        if self.variant == VARIANT_DIPA:
            _require(self.lambda_tv == 0.0, "variant 'dipa' requires lambda_tv = 0")
        # steps=0 is allowed and returns the seeded initialization unchanged.
        _require(self.steps >= 0, "steps must be >= 0")
        _require(self.step_size > 0.0, "step_size must be positive")
        _require(self.patch_side >= 1, "patch_side must be >= 1")
        _require(self.pool_kernel >= 1 and self.pool_kernel % 2 == 1, "pool_kernel must be odd and >= 1")
        _require(self.pool_stride >= 1, "pool_stride must be >= 1")
        _require(self.jitter_samples >= 1, "jitter_samples must be >= 1")
        _require(-(2**63) <= self.seed < 2**63, "seed must fit in 64 bits")
        object.__setattr__(self, "ensemble_ids", tuple(self.ensemble_ids))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["placement"] = self.placement.to_dict()
        d["ensemble_ids"] = list(self.ensemble_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "placement" in d:
            d["placement"] = Placement.from_dict(d["placement"])
        if "ensemble_ids" in d:
            d["ensemble_ids"] = tuple(d["ensemble_ids"])
        return cls(**d)


def default_attack_config(variant: str = VARIANT_DIPA, **overrides) -> AttackConfig:
    """Production defaults; DiPA-TV picks up lambda_tv = 0.05 unless overridden."""
    kwargs = {"variant": variant}
    if variant == VARIANT_DIPA_TV:
        kwargs["lambda_tv"] = 0.05
    kwargs.update(overrides)
    return AttackConfig(**kwargs)


# ---------------------------------------------------------------------------
# Patch
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchMetadata:
    config: AttackConfig
    final_loss: float
    seed: int

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "final_loss": self.final_loss, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchMetadata":
        return cls(config=AttackConfig.from_dict(d["config"]), final_loss=d["final_loss"], seed=d["seed"])


@dataclass(frozen=True)
class Patch:
    """D x D x 3 optimizable patch with generation metadata."""

    data: np.ndarray
    metadata: PatchMetadata

    def __post_init__(self):
        d = self.data
        _require(isinstance(d, np.ndarray) and d.ndim == 3 and d.shape[2] == 3, "patch must be DxDx3")
        _require(d.shape[0] == d.shape[1], "patch must be square")
        _require(d.dtype == np.float64, "patch data must be float64")
        _require(bool((d >= 0.0).all() and (d <= 1.0).all()), "patch values must lie in [0, 1]")
        _require(d.shape[0] == self.metadata.config.patch_side,
                 f"patch side {d.shape[0]} does not match configured {self.metadata.config.patch_side}")
        d.flags.writeable = False

    @property
    def side(self) -> int:
        return self.data.shape[0]

    def to_dict(self) -> dict:
        return {"data": self.data.tolist(), "metadata": self.metadata.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Patch":
        return cls(data=np.asarray(d["data"], dtype=np.float64), metadata=PatchMetadata.from_dict(d["metadata"]))


def export_patch(patch: Patch, png_path, json_path=None) -> None:
    """Write the 8-bit PNG display artifact plus its sidecar metadata document."""
    png_path = Path(png_path)
    if json_path is None:
        json_path = png_path.with_suffix(".json")
    Image.fromarray(to_uint8(patch.data), mode="RGB").save(png_path, format="PNG")
    cfg = patch.metadata.config
    sidecar = {
        "variant": cfg.variant,
        "lambda_tv": cfg.lambda_tv,
        "steps": cfg.steps,
        "seed": patch.metadata.seed,
        "ensemble_ids": list(cfg.ensemble_ids),
        "final_loss": patch.metadata.final_loss,
        "patch_side": cfg.patch_side,
    }
    Path(json_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def import_patch(png_path, json_path=None) -> Patch:
    """Load an exported patch; unlisted config fields fall back to defaults."""
    png_path = Path(png_path)
    if json_path is None:
        json_path = png_path.with_suffix(".json")
    sidecar = json.loads(Path(json_path).read_text())
    img = load_image(png_path)
    _require(img.height == img.width == sidecar["patch_side"],
             "patch image size does not match sidecar patch_side")
    cfg = default_attack_config(
        variant=sidecar["variant"],
        lambda_tv=sidecar["lambda_tv"],
        steps=sidecar["steps"],
        patch_side=sidecar["patch_side"],
        ensemble_ids=tuple(sidecar["ensemble_ids"]),
        seed=sidecar["seed"],
    )
    meta = PatchMetadata(config=cfg, final_loss=sidecar["final_loss"], seed=sidecar["seed"])
    return Patch(data=img.data.copy(), metadata=meta)


# ---------------------------------------------------------------------------
# Trial records and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialRecord:
    """Outcome of one verification attempt against a (possibly patched) photo."""

    true_identity: str
    predicted_identity: Optional[str]  # None encodes "no face detected"
    detection_confidence: float  # percent scale
    trial_index: int

    def __post_init__(self):
        _require(0.0 <= self.detection_confidence <= 100.0,
                 "detection_confidence must lie in [0, 100]")

    def to_dict(self) -> dict:
        return {
            "true_identity": self.true_identity,
            "predicted_identity": self.predicted_identity if self.predicted_identity is not None else NONE_IDENTITY,
            "detection_confidence": self.detection_confidence,
            "trial_index": self.trial_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        pred = d["predicted_identity"]
        if pred == NONE_IDENTITY:
            pred = None
        return cls(
            true_identity=d["true_identity"],
            predicted_identity=pred,
            detection_confidence=d["detection_confidence"],
            trial_index=d["trial_index"],
        )


@dataclass(frozen=True)
class EvaluationReport:
    """Aggregated dodging metrics for one (method, subject) cell."""

    method: str
    subject: str
    similarity: dict  # verifier id -> mean cosine similarity
    asr: float
    mean_confidence: float
    none_fraction: float  # fraction of trials with no face detected
    trial_count: int

    def __post_init__(self):
        _require(0.0 <= self.asr <= 1.0, "asr must lie in [0, 1]")
        _require(0.0 <= self.none_fraction <= 1.0, "none_fraction must lie in [0, 1]")
        _require(self.trial_count >= 1, "trial_count must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(**d)

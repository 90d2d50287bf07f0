"""Differentiable image operators: median pooling, total variation, patch
compositing, model preprocessing, and the simulated camera channel.

All operators work on float64 torch tensors in HWC layout and are pure
functions of their inputs (plus an explicit rng where noted), so they are
safe to call concurrently. Gradients flow through torch autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .types import ImageTensor, Placement, ValidationError, _require

TV_EPS = 1e-8


class DimensionError(ValueError):
    """Kernel/shape mismatch in a pooling or warping operator."""


class PlacementError(ValueError):
    """Placement degenerates to a sub-pixel mapped region."""


def as_tensor(x) -> torch.Tensor:
    """Coerce ImageTensor / ndarray / tensor to a float64 torch tensor."""
    if isinstance(x, ImageTensor):
        x = x.data
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    arr = np.asarray(x)
    if not arr.flags.writeable:  # frozen domain-type payloads
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=torch.float64)


# ---------------------------------------------------------------------------
# Median pooling
# ---------------------------------------------------------------------------

def median_pool(p, kernel: int, stride: int = 1) -> torch.Tensor:
    """Per-channel sliding-window median with a k x k window.

    Output side is floor((D - k) / stride) + 1. The derivative routes entirely
    to the element selected as median; among equal values the one with the
    lowest flattened window index is selected.
    """
    p = as_tensor(p)
    _require(p.ndim == 3, "median_pool expects an HxWxC array")
    h, w, c = p.shape
    if kernel < 1 or kernel % 2 == 0:
        raise DimensionError(f"kernel must be odd and >= 1, got {kernel}")
    if kernel > h or kernel > w:
        raise DimensionError(f"kernel {kernel} exceeds input side {min(h, w)}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if kernel == 1 and stride == 1:
        return p

    # (C, H, W) -> windows (C, oh, ow, k*k)
    chw = p.permute(2, 0, 1)
    win = chw.unfold(1, kernel, stride).unfold(2, kernel, stride)
    cdim, oh, ow = win.shape[0], win.shape[1], win.shape[2]
    win = win.reshape(cdim, oh, ow, kernel * kernel)

    n = kernel * kernel
    med = win.detach().kthvalue((n + 1) // 2, dim=-1, keepdim=True).values
    # lowest flattened index among elements equal to the median
    idx_grid = torch.arange(n, dtype=torch.int64).expand_as(win)
    sel = torch.where(win.detach() == med, idx_grid, torch.full_like(idx_grid, n)).min(dim=-1, keepdim=True).values
    out = torch.gather(win, -1, sel).squeeze(-1)
    return out.permute(1, 2, 0)


# ---------------------------------------------------------------------------
# Total variation
# ---------------------------------------------------------------------------

def total_variation(p, eps: float = TV_EPS) -> torch.Tensor:
    """Isotropic total variation, summed over channels.

    Missing-neighbor differences at the last row/column are treated as 0.
    With eps > 0 the sqrt(eps) bias is subtracted from every term so constant
    inputs score exactly 0 while the gradient stays defined on flat regions.
    """
    p = as_tensor(p)
    _require(p.ndim == 3, "total_variation expects an HxWxC array")
    h, w, c = p.shape
    dd = torch.zeros_like(p)
    dr = torch.zeros_like(p)
    if h > 1:
        dd = torch.nn.functional.pad((p[:-1, :, :] - p[1:, :, :]).permute(2, 0, 1), (0, 0, 0, 1)).permute(1, 2, 0)
    if w > 1:
        dr = torch.nn.functional.pad((p[:, :-1, :] - p[:, 1:, :]).permute(2, 0, 1), (0, 1, 0, 0)).permute(1, 2, 0)
    terms = torch.sqrt(dd * dd + dr * dr + eps)
    if eps > 0.0:
        # subtract per term, not after the sum: IEEE sqrt makes each
        # flat-region term exactly sqrt(eps), so constants score exactly 0
        terms = terms - math.sqrt(eps)
    return terms.sum()


# ---------------------------------------------------------------------------
# Bilinear sampling helpers
# ---------------------------------------------------------------------------

def _bilinear_gather(src: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample src (H, W, C) at fractional pixel coords with border clamping."""
    h, w = src.shape[0], src.shape[1]
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy = (py - y0).unsqueeze(-1)
    wx = (px - x0).unsqueeze(-1)
    y0 = y0.long()
    x0 = x0.long()
    y0c = y0.clamp(0, h - 1)
    y1c = (y0 + 1).clamp(0, h - 1)
    x0c = x0.clamp(0, w - 1)
    x1c = (x0 + 1).clamp(0, w - 1)
    v00 = src[y0c, x0c]
    v01 = src[y0c, x1c]
    v10 = src[y1c, x0c]
    v11 = src[y1c, x1c]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bot * wy


def _pixel_centers(n: int) -> torch.Tensor:
    return torch.arange(n, dtype=torch.float64) + 0.5


# ---------------------------------------------------------------------------
# Patch compositing (operator A)
# ---------------------------------------------------------------------------

def apply_patch(x, q, placement: Placement) -> torch.Tensor:
    """Composite patch q into image x under the placement's affine map.

    The patch square of side scale * min(H, W) pixels, centered at
    (center_x * W, center_y * H) and rotated by rotation_deg (counterclockwise
    in image coordinates), replaces the image opaquely; q is resampled
    bilinearly. Pixels outside the mapped quad are bit-identical to x.
    Differentiable with respect to q.
    """
    x = as_tensor(x)
    q = as_tensor(q)
    _require(x.ndim == 3 and q.ndim == 3, "apply_patch expects HxWxC arrays")
    h, w = x.shape[0], x.shape[1]
    qh, qw = q.shape[0], q.shape[1]
    side_px = placement.scale * min(h, w)
    if side_px < 1.0:
        raise PlacementError(f"mapped patch side {side_px:.3f}px is below the 1-pixel minimum")

    cx = placement.center_x * w
    cy = placement.center_y * h
    theta = math.radians(placement.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    yc = _pixel_centers(h).view(h, 1) - cy
    xc = _pixel_centers(w).view(1, w) - cx
    # inverse rotation into the patch frame
    u = (cos_t * xc + sin_t * yc) / side_px + 0.5
    v = (-sin_t * xc + cos_t * yc) / side_px + 0.5
    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)

    px = u * qw - 0.5
    py = v * qh - 0.5
    sampled = _bilinear_gather(q, py, px)
    return torch.where(inside.unsqueeze(-1), sampled, x)


def sample_placement(placement: Placement, rng: np.random.Generator) -> Placement:
    """Draw one jittered placement, clamped so the patch stays in bounds.

    Four uniforms are always consumed (dx, dy, dscale, drot order) so the rng
    stream advances identically regardless of which ranges are zero. Clamping
    is conservative for non-square images: the center is kept at least half
    the rotated bounding box away from every border in normalized units of
    the shorter image side.
    """
    j = placement.jitter
    dx = float(rng.uniform(-j.dx, j.dx))
    dy = float(rng.uniform(-j.dy, j.dy))
    ds = float(rng.uniform(-j.dscale, j.dscale))
    dr = float(rng.uniform(-j.drot, j.drot))
    if j.dx == j.dy == j.dscale == j.drot == 0.0:
        return Placement(
            center_x=placement.center_x,
            center_y=placement.center_y,
            scale=placement.scale,
            rotation_deg=placement.rotation_deg,
        )

    rot = placement.rotation_deg + dr
    theta = math.radians(rot)
    extent = abs(math.cos(theta)) + abs(math.sin(theta))  # AABB side / patch side
    scale = placement.scale + ds
    scale = min(max(scale, 1e-3), 1.0, 1.0 / extent)
    half = scale * extent / 2.0

    def clamp_center(c):
        lo, hi = half, 1.0 - half
        if lo > hi:
            return 0.5
        return min(max(c, lo), hi)

    return Placement(
        center_x=clamp_center(placement.center_x + dx),
        center_y=clamp_center(placement.center_y + dy),
        scale=scale,
        rotation_deg=rot,
    )


# ---------------------------------------------------------------------------
# Model preprocessing
# ---------------------------------------------------------------------------

def bilinear_resize(x, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize with half-pixel-center alignment; identity when sizes match."""
    x = as_tensor(x)
    h, w = x.shape[0], x.shape[1]
    if (h, w) == (out_h, out_w):
        return x
    py = (_pixel_centers(out_h) * h / out_h - 0.5).view(out_h, 1).expand(out_h, out_w)
    px = (_pixel_centers(out_w) * w / out_w - 0.5).view(1, out_w).expand(out_h, out_w)
    return _bilinear_gather(x, py, px)


def preprocess_for_model(x, input_side: int, out_scale: float = 2.0, out_offset: float = -1.0) -> torch.Tensor:
    """Resize to the model's input side and map intensities to its range.

    The default affine map takes [0, 1] to [-1, 1], the convention shared by
    the bundled embedders. Differentiable.
    """
    resized = bilinear_resize(x, input_side, input_side)
    return resized * out_scale + out_offset


# ---------------------------------------------------------------------------
# Simulated camera channel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraChannelConfig:
    """Desk-scale stand-in for an uncontrolled sensing pipeline."""

    gamma: float = 1.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    downscale_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        _require(self.gamma > 0.0, "gamma must be positive")
        _require(self.blur_sigma >= 0.0, "blur_sigma must be nonnegative")
        _require(self.noise_sigma >= 0.0, "noise_sigma must be nonnegative")
        _require(self.downscale_factor >= 1.0, "downscale_factor must be >= 1")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "blur_sigma": self.blur_sigma,
            "noise_sigma": self.noise_sigma,
            "downscale_factor": self.downscale_factor,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraChannelConfig":
        return cls(**d)


def simulate_camera_channel(x, cfg: CameraChannelConfig) -> ImageTensor:
    """Gamma -> Gaussian blur -> downscale/upscale -> additive noise -> clamp.

    Identity-config stages are skipped entirely, so the identity channel is
    bit-exact. Seeded and reproducible; not part of any gradient path.
    """
    if isinstance(x, torch.Tensor):
        data = x.detach().cpu().numpy().astype(np.float64)
    elif isinstance(x, ImageTensor):
        data = np.array(x.data, dtype=np.float64)
    else:
        data = np.asarray(x, dtype=np.float64)
    h, w = data.shape[0], data.shape[1]
    if cfg.gamma != 1.0:
        data = np.power(data, cfg.gamma)
    if cfg.blur_sigma > 0.0:
        data = gaussian_filter(data, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0.0))
    if cfg.downscale_factor > 1.0:
        lh = max(1, int(round(h / cfg.downscale_factor)))
        lw = max(1, int(round(w / cfg.downscale_factor)))
        low = bilinear_resize(torch.from_numpy(data), lh, lw)
        data = bilinear_resize(low, h, w).numpy()
    if cfg.noise_sigma > 0.0:
        rng = np.random.default_rng(cfg.seed)
        data = data + rng.normal(0.0, cfg.noise_sigma, size=data.shape)
    data = np.clip(data, 0.0, 1.0)
    return ImageTensor(data=data)

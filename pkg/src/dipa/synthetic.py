"""Procedural stand-in portraits for offline runs.

Each seed yields a distinct, smooth, deterministic frontal "face" crop:
a skin ellipse with eyes, brows, nose shading and a mouth over a soft
background. Good enough to give embedders identity-specific structure
without shipping any real photographs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .types import ImageTensor


def _soft_ellipse(yy, xx, cy, cx, ry, rx, softness=0.04):
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return expit(-(d - 1.0) / softness)


def synthetic_face(seed: int, size: int = 112) -> ImageTensor:
    """Deterministic portrait-like image for the given identity seed."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    # background: tilted gradient with a per-identity hue
    bg = np.empty((size, size, 3))
    base = rng.uniform(0.25, 0.6, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=2)
    for c in range(3):
        bg[:, :, c] = base[c] + tilt[0] * yy + tilt[1] * xx

    skin = np.array([rng.uniform(0.55, 0.85), rng.uniform(0.4, 0.65), rng.uniform(0.3, 0.55)])
    face_rx = rng.uniform(0.3, 0.38)
    face_ry = rng.uniform(0.38, 0.46)
    face = _soft_ellipse(yy, xx, 0.52, 0.5, face_ry, face_rx)

    img = bg * (1 - face[:, :, None]) + skin[None, None, :] * face[:, :, None]

    # hair band across the top of the face ellipse
    hair = _soft_ellipse(yy, xx, 0.22, 0.5, rng.uniform(0.12, 0.2), face_rx * 1.05)
    hair_color = rng.uniform(0.05, 0.35, size=3)
    img = img * (1 - hair[:, :, None]) + hair_color[None, None, :] * hair[:, :, None]

    eye_dx = rng.uniform(0.12, 0.17)
    eye_y = rng.uniform(0.4, 0.46)
    eye_r = rng.uniform(0.028, 0.042)
    eye_color = rng.uniform(0.02, 0.25, size=3)
    for sx in (-1, 1):
        eye = _soft_ellipse(yy, xx, eye_y, 0.5 + sx * eye_dx, eye_r, eye_r * 1.5, softness=0.02)
        img = img * (1 - eye[:, :, None]) + eye_color[None, None, :] * eye[:, :, None]
        brow = _soft_ellipse(yy, xx, eye_y - rng.uniform(0.05, 0.08), 0.5 + sx * eye_dx,
                             0.012, eye_r * 2.0, softness=0.02)
        img = img * (1 - 0.7 * brow[:, :, None]) + 0.7 * brow[:, :, None] * hair_color[None, None, :]

    nose = _soft_ellipse(yy, xx, 0.56, 0.5, rng.uniform(0.05, 0.08), 0.02, softness=0.03)
    img = img - 0.12 * nose[:, :, None]

    mouth_w = rng.uniform(0.08, 0.13)
    mouth = _soft_ellipse(yy, xx, rng.uniform(0.68, 0.73), 0.5, 0.022, mouth_w, softness=0.02)
    mouth_color = np.array([rng.uniform(0.45, 0.7), rng.uniform(0.1, 0.25), rng.uniform(0.15, 0.3)])
    img = img * (1 - mouth[:, :, None]) + mouth_color[None, None, :] * mouth[:, :, None]

    # mild texture so embeddings are not driven by flat regions only
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return ImageTensor(data=np.clip(img, 0.0, 1.0))


def synthetic_subjects(count: int, size: int = 112, base_seed: int = 1000):
    """List of (label, ImageTensor) pairs with well-separated identity seeds."""
    return [(f"subject-{i}", synthetic_face(base_seed + 7919 * i, size=size)) for i in range(count)]

"""Patch generation: the ensemble-similarity loss and the projected
adaptive-moment descent loop that minimizes it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .embedders import Embedder, cosine_t
from .imaging import apply_patch, as_tensor, median_pool, sample_placement, total_variation
from .types import AttackConfig, ImageTensor, Patch, PatchMetadata

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
INIT_LO, INIT_HI = 0.4, 0.6


class OptimizationError(RuntimeError):
    """Non-finite loss or other unrecoverable failure inside the attack loop."""


@dataclass(frozen=True)
class LossTrace:
    """Per-step loss components; index 0 is the initial evaluation."""

    total: tuple
    similarity: tuple
    tv: tuple

    def __post_init__(self):
        assert len(self.total) == len(self.similarity) == len(self.tv)

    def __len__(self):
        return len(self.total)


@dataclass(frozen=True)
class LossValue:
    total: torch.Tensor
    similarity: float
    tv: float


def clean_embeddings(x, ensemble: Sequence[Embedder]) -> List[torch.Tensor]:
    """Embed the unpatched photo once per ensemble member (no grad)."""
    x_t = as_tensor(x)
    with torch.no_grad():
        return [e.embed_image(x_t).detach() for e in ensemble]


def dipa_loss(
    p,
    x,
    ensemble: Sequence[Embedder],
    cfg: AttackConfig,
    rng: np.random.Generator,
    clean: Optional[Sequence[torch.Tensor]] = None,
    reference: Optional[object] = None,
) -> LossValue:
    """Ensemble cosine similarity of the patched photo to the clean photo,
    averaged over jittered placements, plus the weighted smoothness term.

    Differentiable with respect to p. `clean` carries precomputed clean-photo
    embeddings; they are computed (and not cached across calls) when omitted.
    `reference` optionally replaces the probe photo as the dodging target,
    for setups where the enrolled photo differs from the uploaded one.
    """
    if len(ensemble) == 0:
        raise OptimizationError("ensemble must contain at least one embedder")
    p = as_tensor(p)
    x_t = as_tensor(x)
    if clean is None:
        clean = clean_embeddings(x_t if reference is None else reference, ensemble)

    pooled = median_pool(p, cfg.pool_kernel, cfg.pool_stride)
    sim_total = torch.zeros((), dtype=torch.float64)
    for _ in range(cfg.jitter_samples):
        placement = sample_placement(cfg.placement, rng)
        adv = apply_patch(x_t, pooled, placement)
        for emb, ref in zip(ensemble, clean):
            sim_total = sim_total + cosine_t(emb.embed_image(adv), ref)
    sim = sim_total / cfg.jitter_samples

    if cfg.lambda_tv > 0.0:
        tv_term = cfg.lambda_tv * total_variation(p)
    else:
        tv_term = torch.zeros((), dtype=torch.float64)
    total = sim + tv_term
    return LossValue(total=total, similarity=float(sim.detach()), tv=float(tv_term.detach()))


def init_patch(cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    """Seeded uniform noise around mid-gray, away from the projection walls."""
    side = cfg.patch_side
    return rng.uniform(INIT_LO, INIT_HI, size=(side, side, 3))


def optimize_patch(
    x,
    ensemble: Sequence[Embedder],
    cfg: AttackConfig,
    progress: Optional[Callable[[int, int], None]] = None,
    reference: Optional[object] = None,
) -> tuple[Patch, LossTrace]:
    """Run cfg.steps iterations of adaptive-moment descent on the loss,
    projecting the patch into [0, 1] after every step.

    All randomness (init noise, placement jitter) flows from one generator
    seeded with cfg.seed, so runs are bit-reproducible on a fixed platform.
    `reference` optionally overrides the dodging target photo.
    """
    rng = np.random.default_rng(cfg.seed)
    p = torch.from_numpy(init_patch(cfg, rng))
    clean = clean_embeddings(x if reference is None else reference, ensemble)

    m = torch.zeros_like(p)
    v = torch.zeros_like(p)
    totals: List[float] = []
    sims: List[float] = []
    tvs: List[float] = []

    for t in range(cfg.steps):
        p_var = p.clone().requires_grad_(True)
        loss = dipa_loss(p_var, x, ensemble, cfg, rng, clean=clean)
        total = float(loss.total.detach())
        if not np.isfinite(total):
            raise OptimizationError(
                f"non-finite loss at step {t}: total={total}, "
                f"similarity={loss.similarity}, tv={loss.tv}")
        totals.append(total)
        sims.append(loss.similarity)
        tvs.append(loss.tv)

        loss.total.backward()
        g = p_var.grad
        with torch.no_grad():
            m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
            m_hat = m / (1 - ADAM_BETA1 ** (t + 1))
            v_hat = v / (1 - ADAM_BETA2 ** (t + 1))
            p = (p - cfg.step_size * m_hat / (v_hat.sqrt() + ADAM_EPS)).clamp(0.0, 1.0)
        if progress is not None:
            progress(t + 1, cfg.steps)

    with torch.no_grad():
        final = dipa_loss(p, x, ensemble, cfg, rng, clean=clean)
    totals.append(float(final.total))
    sims.append(final.similarity)
    tvs.append(final.tv)

    patch = Patch(
        data=p.numpy().copy(),
        metadata=PatchMetadata(config=cfg, final_loss=totals[-1], seed=cfg.seed),
    )
    trace = LossTrace(total=tuple(totals), similarity=tuple(sims), tv=tuple(tvs))
    return patch, trace


def generate_patch_set(
    x,
    ensemble: Sequence[Embedder],
    cfg: AttackConfig,
    count: int = 5,
    progress: Optional[Callable[[int, int, int], None]] = None,
    reference: Optional[object] = None,
) -> List[Patch]:
    """Run the attack `count` times with seeds seed, seed+1, ...; patches come
    back sorted by final loss ascending. Any failing run fails the whole set.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    patches = []
    for k in range(count):
        run_cfg = AttackConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + k})
        cb = (lambda step, total, k=k: progress(k, step, total)) if progress is not None else None
        patch, _ = optimize_patch(x, ensemble, run_cfg, progress=cb, reference=reference)
        patches.append(patch)
    return sorted(patches, key=lambda q: q.metadata.final_loss)

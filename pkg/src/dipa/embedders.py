"""Face-embedding surrogates: a uniform embedder interface, a data-driven
registry, bundled synthetic-tiny networks, and similarity computation.

The synthetic-tiny embedders are small seeded convolutional networks so the
whole pipeline runs offline; the pretrained kind loads a TorchScript module
from disk for realistic runs. Embedders are immutable after load and safe
for concurrent calls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .imaging import preprocess_for_model
from .types import Embedding, ImageTensor, ValidationError, _require

KIND_SYNTHETIC = "synthetic-tiny"
KIND_PRETRAINED = "pretrained"


class EmbedderError(ValueError):
    """Unknown embedder id, missing weights, or shape mismatch."""


@dataclass(frozen=True)
class EmbedderSpec:
    id: str
    input_side: int = 112
    embedding_dim: int = 64
    kind: str = KIND_SYNTHETIC
    weights_ref: str = "0"  # seed for synthetic-tiny, filesystem path for pretrained

    def __post_init__(self):
        _require(self.input_side >= 8, "input_side must be >= 8")
        _require(self.embedding_dim >= 2, "embedding_dim must be >= 2")
        _require(self.kind in (KIND_SYNTHETIC, KIND_PRETRAINED), f"unknown embedder kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "input_side": self.input_side,
            "embedding_dim": self.embedding_dim,
            "kind": self.kind,
            "weights_ref": self.weights_ref,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderSpec":
        return cls(**d)


def _normalize(e: torch.Tensor) -> torch.Tensor:
    return e / e.norm().clamp_min(1e-12)


class Embedder:
    """Base interface: a deterministic, differentiable map image -> unit vector."""

    spec: EmbedderSpec

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Unit-norm embedding of a preprocessed (S, S, 3) tensor; keeps grad."""
        raise NotImplementedError

    def embed_image(self, img) -> torch.Tensor:
        """Preprocess a raw [0,1] image (any size) and embed it; keeps grad."""
        return self.forward(preprocess_for_model(img, self.spec.input_side))

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        s = self.spec.input_side
        if x.ndim != 3 or x.shape[0] != s or x.shape[1] != s:
            raise EmbedderError(
                f"embedder {self.spec.id!r} expects a {s}x{s}x3 input, got {tuple(x.shape)}")
        return x.to(torch.float64)


class TinyConvEmbedder(Embedder):
    """Three seeded conv layers (stride 2, tanh), average-pooled onto a 4x4
    spatial grid, then flattened into a linear projection.

    The grid pooling keeps the features spatially aware, like the
    flatten-plus-FC heads of real FR backbones. Weights are drawn from a
    torch.Generator seeded by the spec, layer by layer in declaration order,
    so the network is fully reproducible.
    """

    POOL_GRID = 4

    def __init__(self, spec: EmbedderSpec):
        self.spec = spec
        seed = int(spec.weights_ref)
        gen = torch.Generator().manual_seed(seed)
        self.convs = []
        chans = [3, 8, 16, 32]
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = torch.nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1).double()
            with torch.no_grad():
                std = 1.0 / np.sqrt(cin * 9)
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64) * std)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen, dtype=torch.float64) * 0.1)
            conv.requires_grad_(False)
            self.convs.append(conv)
        feat = chans[-1] * self.POOL_GRID * self.POOL_GRID
        self.proj = torch.nn.Linear(feat, spec.embedding_dim).double()
        with torch.no_grad():
            self.proj.weight.copy_(
                torch.randn(self.proj.weight.shape, generator=gen, dtype=torch.float64) / np.sqrt(feat))
            self.proj.bias.copy_(torch.zeros(self.proj.bias.shape, dtype=torch.float64))
        self.proj.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._check_input(x)
        t = x.permute(2, 0, 1).unsqueeze(0)
        for conv in self.convs:
            t = torch.tanh(conv(t))
        pooled = torch.nn.functional.adaptive_avg_pool2d(t, self.POOL_GRID).flatten()
        return _normalize(self.proj(pooled))


class TorchScriptEmbedder(Embedder):
    """Pretrained embedder backed by a TorchScript module on disk."""

    def __init__(self, spec: EmbedderSpec):
        self.spec = spec
        path = Path(spec.weights_ref)
        if not path.exists():
            raise EmbedderError(f"weights for embedder {spec.id!r} not found at {path}")
        self.module = torch.jit.load(str(path)).double().eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._check_input(x)
        out = self.module(x.permute(2, 0, 1).unsqueeze(0)).reshape(-1)
        if out.shape[0] != self.spec.embedding_dim:
            raise EmbedderError(
                f"embedder {self.spec.id!r} returned dim {out.shape[0]}, expected {self.spec.embedding_dim}")
        return _normalize(out)


def build_embedder(spec: EmbedderSpec) -> Embedder:
    if spec.kind == KIND_SYNTHETIC:
        return TinyConvEmbedder(spec)
    return TorchScriptEmbedder(spec)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

class EmbedderRegistry:
    """Maps embedder ids to specs; loads and caches embedder instances."""

    def __init__(self, specs: Sequence[EmbedderSpec] = ()):
        self._specs: Dict[str, EmbedderSpec] = {}
        self._cache: Dict[str, Embedder] = {}
        for spec in specs:
            self.register(spec)

    def register(self, spec: EmbedderSpec) -> None:
        self._specs[spec.id] = spec

    def ids(self) -> List[str]:
        return list(self._specs)

    def get_spec(self, embedder_id: str) -> EmbedderSpec:
        if embedder_id not in self._specs:
            raise EmbedderError(f"unknown embedder id {embedder_id!r}")
        return self._specs[embedder_id]

    def load(self, embedder_id: str) -> Embedder:
        if embedder_id not in self._cache:
            self._cache[embedder_id] = build_embedder(self.get_spec(embedder_id))
        return self._cache[embedder_id]

    @classmethod
    def from_manifest(cls, path) -> "EmbedderRegistry":
        records = json.loads(Path(path).read_text())
        return cls([EmbedderSpec.from_dict(r) for r in records])

    def to_manifest(self, path) -> None:
        records = [self._specs[i].to_dict() for i in self._specs]
        Path(path).write_text(json.dumps(records, indent=2) + "\n")


#: Bundled synthetic embedders; tiny-a/b/c form the default attack ensemble
#: and tiny-d stays held out for transfer evaluation.
BUILTIN_SPECS = (
    EmbedderSpec(id="tiny-a", input_side=112, embedding_dim=64, kind=KIND_SYNTHETIC, weights_ref="11"),
    EmbedderSpec(id="tiny-b", input_side=112, embedding_dim=64, kind=KIND_SYNTHETIC, weights_ref="23"),
    EmbedderSpec(id="tiny-c", input_side=112, embedding_dim=64, kind=KIND_SYNTHETIC, weights_ref="37"),
    EmbedderSpec(id="tiny-d", input_side=112, embedding_dim=64, kind=KIND_SYNTHETIC, weights_ref="53"),
)

DEFAULT_ENSEMBLE_IDS = ("tiny-a", "tiny-b", "tiny-c")
HELD_OUT_ID = "tiny-d"


def default_registry() -> EmbedderRegistry:
    return EmbedderRegistry(BUILTIN_SPECS)


def load_ensemble(ids: Sequence[str], registry: EmbedderRegistry) -> List[Embedder]:
    """Resolve ids to embedders, order preserved; duplicates share weights."""
    if len(ids) == 0:
        raise EmbedderError("ensemble must contain at least one embedder")
    return [registry.load(i) for i in ids]


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def cosine_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two unit vectors as a tensor (keeps grad)."""
    if a.shape != b.shape:
        raise EmbedderError(f"embedding dims differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a * b).sum().clamp(-1.0, 1.0)


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    if a.dim != b.dim:
        raise EmbedderError(f"embedding dims differ: {a.dim} vs {b.dim}")
    return float(np.clip(np.dot(a.data, b.data), -1.0, 1.0))


def embed(embedder: Embedder, x) -> Embedding:
    """Embed a preprocessed model input array into a unit-norm Embedding."""
    from .imaging import as_tensor

    out = embedder.forward(as_tensor(x))
    return Embedding(data=out.detach().cpu().numpy())

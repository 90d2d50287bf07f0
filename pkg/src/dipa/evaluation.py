"""Dodging metrics, verifiers, the simulated-physical trial runner, the
benchmark protocol, and report rendering.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .embedders import Embedder, EmbedderRegistry, cosine_t, load_ensemble
from .imaging import CameraChannelConfig, apply_patch, as_tensor, sample_placement, simulate_camera_channel
from .optimizer import generate_patch_set
from .synthetic import synthetic_face
from .types import (
    AttackConfig,
    EvaluationReport,
    ImageTensor,
    Patch,
    Placement,
    TrialRecord,
    ValidationError,
    load_image,
    _require,
)

log = logging.getLogger(__name__)

UNKNOWN_IDENTITY = "unknown"
POOLED_SUBJECT = "ALL"
DEFAULT_THRESHOLD = 0.3
DEFAULT_DETECT_FLOOR = 25.0


class VerifierError(RuntimeError):
    """A verifier failed to produce a decision; the trial is invalid."""


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def attack_success_rate(trials: Sequence[TrialRecord]) -> float:
    """Fraction of trials whose predicted identity differs from the true one.

    A no-face outcome (predicted None) counts as different; its rate is also
    surfaced separately via none_fraction since dodging is expected to keep
    the face detectable.
    """
    if len(trials) == 0:
        raise ValidationError("attack_success_rate requires at least one trial")
    wrong = sum(1 for t in trials if t.predicted_identity != t.true_identity)
    return wrong / len(trials)


def none_fraction(trials: Sequence[TrialRecord]) -> float:
    if len(trials) == 0:
        raise ValidationError("none_fraction requires at least one trial")
    return sum(1 for t in trials if t.predicted_identity is None) / len(trials)


def mean_confidence(trials: Sequence[TrialRecord]) -> float:
    if len(trials) == 0:
        raise ValidationError("mean_confidence requires at least one trial")
    return float(np.mean([t.detection_confidence for t in trials]))


def similarity_eval(clean, patched, embedder: Embedder) -> float:
    """Cosine similarity between clean and patched embeddings on one model.

    For transfer evaluation the embedder must be held out of the attack
    ensemble; run_benchmark enforces that.
    """
    with torch.no_grad():
        a = embedder.embed_image(as_tensor(clean))
        b = embedder.embed_image(as_tensor(patched))
        return float(cosine_t(a, b))


# ---------------------------------------------------------------------------
# Verifiers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerifierDecision:
    identity: Optional[str]  # None = no face detected
    confidence: float  # 0-100 face-presence confidence
    similarity: Optional[float] = None


@dataclass(frozen=True)
class VerifierSpec:
    id: str
    kind: str = "local-embedder-gallery"  # | remote-api | mock
    threshold: float = DEFAULT_THRESHOLD
    embedder_id: Optional[str] = None  # backing embedder for local/mock kinds
    endpoint: Optional[str] = None  # remote-api only

    def __post_init__(self):
        _require(-1.0 < self.threshold < 1.0, "threshold must lie in (-1, 1)")
        _require(self.kind in ("local-embedder-gallery", "remote-api", "mock"),
                 f"unknown verifier kind {self.kind!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VerifierSpec":
        return cls(**d)


class LocalGalleryVerifier:
    """Identification over an enrolled gallery with one backing embedder.

    The probe matches the highest-similarity enrolled identity when that
    similarity clears the decision threshold; below it the probe is labeled
    "unknown". Face-presence confidence is a stand-in detector score: the
    probe's similarity to the normalized mean of all enrolled embeddings,
    mapped onto 0-100. Probes whose confidence falls under detect_floor
    count as "no face detected" (identity None).
    """

    def __init__(self, verifier_id: str, embedder: Embedder,
                 threshold: float = DEFAULT_THRESHOLD,
                 detect_floor: float = DEFAULT_DETECT_FLOOR):
        self.id = verifier_id
        self.embedder = embedder
        self.threshold = threshold
        self.detect_floor = detect_floor
        self._gallery: Dict[str, torch.Tensor] = {}
        self._prototype: Optional[torch.Tensor] = None

    def enroll(self, identity: str, photo) -> None:
        with torch.no_grad():
            self._gallery[identity] = self.embedder.embed_image(as_tensor(photo)).detach()
        proto = torch.stack(list(self._gallery.values())).mean(dim=0)
        self._prototype = proto / proto.norm().clamp_min(1e-12)

    def identities(self) -> List[str]:
        return list(self._gallery)

    def verify(self, image) -> VerifierDecision:
        if not self._gallery:
            raise VerifierError(f"verifier {self.id!r} has an empty gallery")
        with torch.no_grad():
            probe = self.embedder.embed_image(as_tensor(image))
            best_id, best_sim = None, -1.0
            for identity, ref in self._gallery.items():
                sim = float(cosine_t(probe, ref))
                if sim > best_sim:
                    best_id, best_sim = identity, sim
            confidence = 50.0 * (1.0 + float(cosine_t(probe, self._prototype)))
        if confidence < self.detect_floor:
            return VerifierDecision(identity=None, confidence=confidence, similarity=best_sim)
        if best_sim >= self.threshold:
            return VerifierDecision(identity=best_id, confidence=confidence, similarity=best_sim)
        return VerifierDecision(identity=UNKNOWN_IDENTITY, confidence=confidence, similarity=best_sim)

    def compare(self, image, reference) -> VerifierDecision:
        """One-to-one similarity between two images (wire "compare" mode)."""
        with torch.no_grad():
            a = self.embedder.embed_image(as_tensor(image))
            b = self.embedder.embed_image(as_tensor(reference))
            sim = float(cosine_t(a, b))
            conf = 50.0 * (1.0 + float(cosine_t(a, self._prototype))) if self._prototype is not None else 50.0
        return VerifierDecision(identity=None, confidence=conf, similarity=sim)


class MockVerifier:
    """Scripted verifier for tests: replays a fixed sequence of decisions."""

    def __init__(self, verifier_id: str, decisions: Sequence[VerifierDecision]):
        self.id = verifier_id
        self._decisions = list(decisions)
        self._i = 0

    def verify(self, image) -> VerifierDecision:
        if self._i >= len(self._decisions):
            raise VerifierError(f"mock verifier {self.id!r} ran out of scripted decisions")
        d = self._decisions[self._i]
        self._i += 1
        return d


def build_verifier(spec: VerifierSpec, registry: EmbedderRegistry,
                   detect_floor: float = DEFAULT_DETECT_FLOOR):
    if spec.kind == "local-embedder-gallery":
        if spec.embedder_id is None:
            raise ValidationError(f"verifier {spec.id!r} needs an embedder_id")
        return LocalGalleryVerifier(spec.id, registry.load(spec.embedder_id),
                                    threshold=spec.threshold, detect_floor=detect_floor)
    if spec.kind == "remote-api":
        from .remote import RemoteVerifierClient

        if spec.endpoint is None:
            raise ValidationError(f"verifier {spec.id!r} needs an endpoint")
        return RemoteVerifierClient(spec.endpoint, verifier_id=spec.id)
    raise ValidationError(f"verifier kind {spec.kind!r} cannot be built from a spec")


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

def _derive_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**62))


def trial_pipeline(photo, patch: Optional[Patch], placement: Placement,
                   channel: CameraChannelConfig, rng: np.random.Generator
                   ) -> Tuple[ImageTensor, ImageTensor]:
    """Composite (with sampled jitter) and push through the camera channel.

    Returns (digital composite, sensed image). With patch=None the composite
    is the photo itself (clean baseline).
    """
    photo_t = as_tensor(photo)
    if patch is not None:
        concrete = sample_placement(placement, rng)
        composite = apply_patch(photo_t, as_tensor(patch.data), concrete)
    else:
        composite = photo_t
    channel_cfg = dataclasses.replace(channel, seed=_derive_seed(rng))
    sensed = simulate_camera_channel(composite, channel_cfg)
    return ImageTensor(data=composite.detach().numpy().copy()), sensed


def run_trial(photo, true_identity: str, patch: Optional[Patch], placement: Placement,
              channel: CameraChannelConfig, verifier, rng: np.random.Generator,
              trial_index: int = 0) -> TrialRecord:
    """Run one simulated-physical verification attempt. Deterministic per rng."""
    _, sensed = trial_pipeline(photo, patch, placement, channel, rng)
    decision = verifier.verify(sensed)
    return TrialRecord(
        true_identity=true_identity,
        predicted_identity=decision.identity,
        detection_confidence=float(np.clip(decision.confidence, 0.0, 100.0)),
        trial_index=trial_index,
    )


# ---------------------------------------------------------------------------
# Benchmark plan and runner
# ---------------------------------------------------------------------------

SYNTHETIC_SCHEME = "synthetic:"


def resolve_photo(ref: str, size: int = 112) -> ImageTensor:
    """Load a subject photo; "synthetic:<seed>" generates a procedural one."""
    if ref.startswith(SYNTHETIC_SCHEME):
        return synthetic_face(int(ref[len(SYNTHETIC_SCHEME):]), size=size)
    return load_image(ref)


@dataclass(frozen=True)
class BenchmarkPlan:
    subjects: tuple  # of (label, photo ref)
    methods: tuple  # of (label, AttackConfig)
    patches_per_subject: int = 5
    trials_per_patch: int = 5
    channel: CameraChannelConfig = field(default_factory=CameraChannelConfig)
    trial_verifier: VerifierSpec = field(default_factory=lambda: VerifierSpec(
        id="camera", kind="local-embedder-gallery", embedder_id="tiny-d"))
    similarity_ids: tuple = ("tiny-d",)
    seed: int = 0

    def __post_init__(self):
        _require(len(self.subjects) >= 1, "plan needs at least one subject")
        _require(len(self.methods) >= 1, "plan needs at least one method")
        _require(self.patches_per_subject >= 1, "patches_per_subject must be >= 1")
        _require(self.trials_per_patch >= 1, "trials_per_patch must be >= 1")
        object.__setattr__(self, "subjects", tuple((str(l), str(r)) for l, r in self.subjects))
        object.__setattr__(self, "methods", tuple((str(l), c) for l, c in self.methods))
        object.__setattr__(self, "similarity_ids", tuple(self.similarity_ids))

    def to_dict(self) -> dict:
        return {
            "subjects": [{"label": l, "photo": r} for l, r in self.subjects],
            "methods": [{"label": l, "config": c.to_dict()} for l, c in self.methods],
            "patches_per_subject": self.patches_per_subject,
            "trials_per_patch": self.trials_per_patch,
            "channel": self.channel.to_dict(),
            "trial_verifier": self.trial_verifier.to_dict(),
            "similarity_ids": list(self.similarity_ids),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkPlan":
        return cls(
            subjects=tuple((s["label"], s["photo"]) for s in d["subjects"]),
            methods=tuple((m["label"], AttackConfig.from_dict(m["config"])) for m in d["methods"]),
            patches_per_subject=d.get("patches_per_subject", 5),
            trials_per_patch=d.get("trials_per_patch", 5),
            channel=CameraChannelConfig.from_dict(d.get("channel", {})),
            trial_verifier=VerifierSpec.from_dict(d["trial_verifier"]) if "trial_verifier" in d
            else BenchmarkPlan.__dataclass_fields__["trial_verifier"].default_factory(),
            similarity_ids=tuple(d.get("similarity_ids", ("tiny-d",))),
            seed=d.get("seed", 0),
        )

    @classmethod
    def from_file(cls, path) -> "BenchmarkPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _cell_seed(plan_seed: int, subject_idx: int, method_idx: int) -> int:
    # spaced far apart so per-set seeds (seed, seed+1, ...) never collide
    return plan_seed + 104729 * (subject_idx + 1) + 1299709 * (method_idx + 1)


def run_benchmark(plan: BenchmarkPlan, registry: EmbedderRegistry
                  ) -> Tuple[List[EvaluationReport], List[dict]]:
    """Execute the full protocol; returns (reports, trial log rows).

    Reports come method-major: one per (method, subject) plus a pooled row
    per method (subject ALL). Invalid trials (verifier failures) are logged
    and excluded from every aggregate.
    """
    photos = []
    for label, ref in plan.subjects:
        try:
            photos.append((label, resolve_photo(ref)))
        except ValidationError as e:
            raise ValidationError(f"subject {label!r}: {e}") from e

    for m_label, cfg in plan.methods:
        overlap = set(cfg.ensemble_ids) & set(plan.similarity_ids)
        if overlap:
            raise ValidationError(
                f"method {m_label!r}: similarity verifiers {sorted(overlap)} are in the attack ensemble; "
                "transfer evaluation requires held-out embedders")

    verifier = build_verifier(plan.trial_verifier, registry)
    if isinstance(verifier, LocalGalleryVerifier):
        for label, photo in photos:
            verifier.enroll(label, photo)
    sim_embedders = {i: registry.load(i) for i in plan.similarity_ids}

    reports: List[EvaluationReport] = []
    log_rows: List[dict] = []
    pooled: Dict[str, Dict] = {}

    for mi, (m_label, cfg) in enumerate(plan.methods):
        pooled[m_label] = {"trials": [], "sims": {i: [] for i in plan.similarity_ids}}
        for si, (s_label, photo) in enumerate(photos):
            ensemble = load_ensemble(cfg.ensemble_ids, registry)
            cell_cfg = AttackConfig.from_dict(
                {**cfg.to_dict(), "seed": _cell_seed(plan.seed, si, mi)})
            patches = generate_patch_set(photo, ensemble, cell_cfg, count=plan.patches_per_subject)

            trials: List[TrialRecord] = []
            sims: Dict[str, List[float]] = {i: [] for i in plan.similarity_ids}
            for pi, patch in enumerate(patches):
                for ti in range(plan.trials_per_patch):
                    rng = np.random.default_rng([plan.seed, si, mi, pi, ti])
                    composite, sensed = trial_pipeline(photo, patch, cfg.placement, plan.channel, rng)
                    try:
                        decision = verifier.verify(sensed)
                    except VerifierError as e:
                        log.warning("invalid trial (subject=%s method=%s patch=%d trial=%d): %s",
                                    s_label, m_label, pi, ti, e)
                        continue
                    record = TrialRecord(
                        true_identity=s_label,
                        predicted_identity=decision.identity,
                        detection_confidence=float(np.clip(decision.confidence, 0.0, 100.0)),
                        trial_index=ti,
                    )
                    trials.append(record)
                    row = record.to_dict()
                    row.update({"method": m_label, "subject": s_label, "patch_index": pi,
                                "similarities": {}})
                    for vid, emb in sim_embedders.items():
                        s = similarity_eval(photo, composite, emb)
                        sims[vid].append(s)
                        row["similarities"][vid] = s
                    log_rows.append(row)

            if trials:
                reports.append(EvaluationReport(
                    method=m_label,
                    subject=s_label,
                    similarity={i: float(np.mean(sims[i])) for i in plan.similarity_ids},
                    asr=attack_success_rate(trials),
                    mean_confidence=mean_confidence(trials),
                    none_fraction=none_fraction(trials),
                    trial_count=len(trials),
                ))
            pooled[m_label]["trials"].extend(trials)
            for i in plan.similarity_ids:
                pooled[m_label]["sims"][i].extend(sims[i])

    for m_label, _ in plan.methods:
        trials = pooled[m_label]["trials"]
        if not trials:
            continue
        reports.append(EvaluationReport(
            method=m_label,
            subject=POOLED_SUBJECT,
            similarity={i: float(np.mean(pooled[m_label]["sims"][i])) for i in plan.similarity_ids},
            asr=attack_success_rate(trials),
            mean_confidence=mean_confidence(trials),
            none_fraction=none_fraction(trials),
            trial_count=len(trials),
        ))
    return reports, log_rows


# ---------------------------------------------------------------------------
# Trial logs
# ---------------------------------------------------------------------------

def write_trial_log(rows: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_trial_log(path) -> List[dict]:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def reports_from_log(rows: Sequence[dict]) -> List[EvaluationReport]:
    """Re-aggregate reports from trial log rows (method-major, pooled last)."""
    methods: List[str] = []
    subjects_by_method: Dict[str, List[str]] = {}
    cells: Dict[Tuple[str, str], List[dict]] = {}
    for row in rows:
        key = (row["method"], row["subject"])
        if row["method"] not in methods:
            methods.append(row["method"])
            subjects_by_method[row["method"]] = []
        if row["subject"] not in subjects_by_method[row["method"]]:
            subjects_by_method[row["method"]].append(row["subject"])
        cells.setdefault(key, []).append(row)

    def aggregate(method: str, subject: str, group: List[dict]) -> EvaluationReport:
        trials = [TrialRecord.from_dict(r) for r in group]
        sim_ids = sorted({k for r in group for k in r.get("similarities", {})})
        return EvaluationReport(
            method=method,
            subject=subject,
            similarity={i: float(np.mean([r["similarities"][i] for r in group])) for i in sim_ids},
            asr=attack_success_rate(trials),
            mean_confidence=mean_confidence(trials),
            none_fraction=none_fraction(trials),
            trial_count=len(trials),
        )

    reports = []
    for m in methods:
        for s in subjects_by_method[m]:
            reports.append(aggregate(m, s, cells[(m, s)]))
    for m in methods:
        group = [r for r in rows if r["method"] == m]
        reports.append(aggregate(m, POOLED_SUBJECT, group))
    return reports


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def _report_columns(reports: Sequence[EvaluationReport]) -> List[str]:
    sim_ids: List[str] = []
    for r in reports:
        for i in r.similarity:
            if i not in sim_ids:
                sim_ids.append(i)
    return sim_ids


def render_report(reports: Sequence[EvaluationReport], fmt: str = "markdown") -> str:
    """Render reports as a table with the columns Sim. (per verifier), ASR,
    and Mean Conf.; markdown bolds the best value per metric column and adds
    a separate detection-preservation section.
    """
    if len(reports) == 0:
        raise ValidationError("render_report requires at least one report")
    if fmt not in ("markdown", "csv"):
        raise ValidationError(f"unknown report format {fmt!r}")
    sim_ids = _report_columns(reports)
    header = ["Method", "Subject"] + [f"Sim. ({i})" for i in sim_ids] + ["ASR", "Mean Conf."]

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for r in reports:
            writer.writerow([r.method, r.subject]
                            + [repr(r.similarity[i]) if i in r.similarity else "" for i in sim_ids]
                            + [repr(r.asr), repr(r.mean_confidence)])
        return buf.getvalue()

    # markdown: mark the best value per metric column (lower similarity is
    # better, higher ASR / confidence is better)
    best_sim = {i: min(r.similarity[i] for r in reports if i in r.similarity) for i in sim_ids}
    best_asr = max(r.asr for r in reports)
    best_conf = max(r.mean_confidence for r in reports)

    def cell(value, best, digits):
        text = f"{value:.{digits}f}"
        return f"**{text}**" if value == best else text

    lines = ["| " + " | ".join(header) + " |",
             "| " + " | ".join("---" for _ in header) + " |"]
    for r in reports:
        row = [r.method, r.subject]
        for i in sim_ids:
            row.append(cell(r.similarity[i], best_sim[i], 3) if i in r.similarity else "")
        row.append(cell(r.asr, best_asr, 3))
        row.append(cell(r.mean_confidence, best_conf, 1))
        lines.append("| " + " | ".join(row) + " |")

    lines.append("")
    lines.append("Detection preserved (fraction of trials with no face detected):")
    lines.append("")
    for r in reports:
        lines.append(f"- {r.method} / {r.subject}: none_fraction = {r.none_fraction:.3f} "
                     f"over {r.trial_count} trials")
    return "\n".join(lines) + "\n"

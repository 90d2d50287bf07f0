"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL line and enforcing its stated runtime budget.
"""

import io
import json
import socket
import threading
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from dipa.cli import main as cli_main
from dipa.embedders import TinyConvEmbedder, default_registry, load_ensemble
from dipa.evaluation import (
    POOLED_SUBJECT,
    BenchmarkPlan,
    VerifierSpec,
    attack_success_rate,
    mean_confidence,
    render_report,
    run_benchmark,
)
from dipa.imaging import (
    CameraChannelConfig,
    apply_patch,
    as_tensor,
    median_pool,
    preprocess_for_model,
    total_variation,
)
from dipa.optimizer import dipa_loss, optimize_patch
from dipa.synthetic import synthetic_face
from dipa.types import Jitter, Placement, TrialRecord, default_attack_config, save_image

from .conftest import FAST_SPECS
from .oracles import (
    finite_difference,
    median_pool_oracle,
    relative_errors,
    total_variation_oracle,
)


@contextmanager
def criterion(name, budget_seconds=None):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE] FAIL  {name}")
        raise
    elapsed = time.monotonic() - start
    if budget_seconds is not None:
        assert elapsed < budget_seconds, f"{name}: {elapsed:.1f}s exceeds {budget_seconds}s budget"
    print(f"[ACCEPTANCE] PASS  {name}  ({elapsed:.1f}s)")


# the desk-scale attack configuration used by the dodging criterion
ATTACK_PLACEMENT = Placement(center_x=0.5, center_y=0.78, scale=0.55, jitter=Jitter())


def attack_cfg(seed):
    return default_attack_config(
        patch_side=64, pool_kernel=5, pool_stride=1, steps=200, step_size=0.05,
        placement=ATTACK_PLACEMENT, jitter_samples=1,
        ensemble_ids=("tiny-a", "tiny-b", "tiny-c"), seed=seed)


def test_median_pool_oracle_equivalence():
    with criterion("oracle equivalence: median pooling (200 arrays, exact)", budget_seconds=10):
        rng = np.random.default_rng(1)
        checked = 0
        for _ in range(200):
            h = int(rng.integers(1, 17))
            w = int(rng.integers(1, 17))
            c = int(rng.integers(1, 4))
            p = rng.uniform(0, 1, (h, w, c))
            for k in range(1, min(h, w) + 1, 2):
                for s in (1, 2, 3):
                    got = median_pool(p, k, s).numpy()
                    assert np.array_equal(got, median_pool_oracle(p, k, s))
                    checked += 1
        assert checked > 200


def test_total_variation_oracle_equivalence():
    with criterion("oracle equivalence: total variation (200 arrays, 1e-9)"):
        rng = np.random.default_rng(2)
        for _ in range(200):
            h = int(rng.integers(1, 17))
            w = int(rng.integers(1, 17))
            p = rng.uniform(0, 1, (h, w, 3))
            got = float(total_variation(p, eps=0.0))
            assert abs(got - total_variation_oracle(p, eps=0.0)) < 1e-9
            c = float(rng.uniform(0.1, 3.0))
            assert abs(float(total_variation(c * p, eps=0.0)) - c * got) < 1e-9
        assert float(total_variation(np.full((9, 9, 3), 0.4), eps=0.0)) == 0.0
        assert float(total_variation(np.full((9, 9, 3), 0.4))) == 0.0


def test_gradient_checks():
    with criterion("gradient checks vs central finite differences", budget_seconds=60):
        rng = np.random.default_rng(3)
        h = 1e-4

        def check(fn, x, tol, mask=None):
            t = torch.tensor(x, requires_grad=True)
            fn(t).backward()
            analytic = t.grad.numpy()
            numeric = finite_difference(lambda v: float(fn(torch.tensor(v))), x, h=h)
            errs = relative_errors(analytic, numeric)
            if mask is not None:
                errs = errs[mask]
            assert errs.max() < tol

        p = rng.uniform(0, 1, (8, 8, 3))
        check(lambda t: total_variation(t, eps=1e-8), p, 1e-3)
        check(lambda t: median_pool(t, 3, 2).sum(), rng.uniform(0, 1, (7, 7, 3)), 1e-3)

        x_img = torch.tensor(rng.uniform(0, 1, (8, 8, 3)))
        w_img = torch.tensor(rng.normal(size=(8, 8, 3)))
        placement = Placement(center_x=0.45, center_y=0.55, scale=0.6, rotation_deg=10.0)
        check(lambda t: (apply_patch(x_img, t, placement) * w_img).sum(),
              rng.uniform(0, 1, (4, 4, 3)), 1e-3)

        w_pre = torch.tensor(rng.normal(size=(4, 4, 3)))
        check(lambda t: (preprocess_for_model(t, 4) * w_pre).sum(),
              rng.uniform(0, 1, (6, 6, 3)), 1e-3)

        # full loss on a 6x6 patch through a synthetic-tiny embedder
        emb = TinyConvEmbedder(FAST_SPECS[0])
        x = rng.uniform(0, 1, (16, 16, 3))
        cfg = default_attack_config(
            patch_side=6, pool_kernel=3, pool_stride=1, steps=1,
            placement=Placement(center_x=0.5, center_y=0.6, scale=0.5, jitter=Jitter()),
            jitter_samples=1, ensemble_ids=(FAST_SPECS[0].id,), seed=0)
        p6 = rng.uniform(0, 1, (6, 6, 3))
        pooled = median_pool(torch.tensor(p6), 3, 1).numpy()
        tie = np.zeros_like(p6, dtype=bool)
        for ch in range(3):
            for i in range(pooled.shape[0]):
                for j in range(pooled.shape[1]):
                    near = np.abs(p6[i:i + 3, j:j + 3, ch] - pooled[i, j, ch]) < 10 * h
                    tie[i:i + 3, j:j + 3, ch] |= near
        check(lambda t: dipa_loss(t, x, [emb], cfg, np.random.default_rng(0)).total,
              p6, 1e-2, mask=~tie)


def test_dodging_effectiveness_desk_scale():
    with criterion("dodging effectiveness: sim <= 0.5, transfer < 0.9, >= 9/10 seeds",
                   budget_seconds=300):
        registry = default_registry()
        ensemble = load_ensemble(("tiny-a", "tiny-b", "tiny-c"), registry)
        held_out = registry.load("tiny-d")
        photo = synthetic_face(1000, size=112)
        x_t = as_tensor(photo)

        with torch.no_grad():
            clean_self = np.mean([
                float((e.embed_image(x_t) * e.embed_image(x_t)).sum()) for e in ensemble])
        assert clean_self >= 0.99

        successes = 0
        for seed in range(10):
            cfg = attack_cfg(seed)
            patch, _ = optimize_patch(photo, ensemble, cfg)
            with torch.no_grad():
                pooled = median_pool(as_tensor(patch.data), cfg.pool_kernel, cfg.pool_stride)
                adv = apply_patch(x_t, pooled, ATTACK_PLACEMENT)
                mean_sim = np.mean([
                    float((e.embed_image(adv) * e.embed_image(x_t)).sum()) for e in ensemble])
                transfer = float((held_out.embed_image(adv) * held_out.embed_image(x_t)).sum())
            if mean_sim <= 0.5 and transfer < 0.9:
                successes += 1
        assert successes >= 9, f"only {successes}/10 seeds succeeded"


def test_variant_equivalence_and_tv_pressure():
    with criterion("variant equivalence: lambda 0 bit-identical; lambda 0.1 smooths"):
        registry = default_registry()
        ensemble = load_ensemble(("tiny-a", "tiny-b"), registry)
        photo = synthetic_face(1000, size=64)
        base = dict(patch_side=24, pool_kernel=3, pool_stride=1, steps=50, step_size=0.05,
                    placement=Placement(center_x=0.5, center_y=0.7, scale=0.5, jitter=Jitter()),
                    jitter_samples=1, ensemble_ids=("tiny-a", "tiny-b"), seed=21)
        plain, _ = optimize_patch(photo, ensemble, default_attack_config("dipa", **base))
        tv_zero, _ = optimize_patch(photo, ensemble,
                                    default_attack_config("dipa-tv", lambda_tv=0.0, **base))
        assert np.array_equal(plain.data, tv_zero.data)

        smooth, _ = optimize_patch(photo, ensemble,
                                   default_attack_config("dipa-tv", lambda_tv=0.1, **base))
        assert float(total_variation(smooth.data, eps=0)) <= float(total_variation(plain.data, eps=0))


def test_metric_correctness():
    with criterion("metric correctness: ASR and mean confidence"):
        trials = [TrialRecord("A", p, 50.0, i) for i, p in enumerate(["B", "A", "B", "B", "A"])]
        assert attack_success_rate(trials) == pytest.approx(0.6)
        conf = [TrialRecord("A", "A", 50.0, 0), TrialRecord("A", "A", 70.0, 1)]
        assert mean_confidence(conf) == pytest.approx(60.0)

        rng = np.random.default_rng(4)
        for _ in range(20):
            preds = [str(rng.choice(["A", "B", "C"])) for _ in range(int(rng.integers(1, 40)))]
            synthetic = [TrialRecord("A", p, float(rng.uniform(0, 100)), i)
                         for i, p in enumerate(preds)]
            hand_count = sum(1 for p in preds if p != "A")
            assert attack_success_rate(synthetic) == pytest.approx(hand_count / len(preds))


def test_protocol_shape_and_report_determinism():
    with criterion("protocol shape: 5x5 trials, Table-1 columns, deterministic CSV"):
        registry = default_registry()
        for spec in FAST_SPECS:
            registry.register(spec)
        cfg = default_attack_config(
            patch_side=12, pool_kernel=3, steps=0, jitter_samples=1,
            placement=Placement(center_x=0.5, center_y=0.7, scale=0.5, jitter=Jitter(dx=0.02)),
            ensemble_ids=("fast-a", "fast-b"), seed=0)
        plan = BenchmarkPlan(
            subjects=(("s0", "synthetic:100"), ("s1", "synthetic:200")),
            methods=(("dipa", cfg),),
            patches_per_subject=5,
            trials_per_patch=5,
            channel=CameraChannelConfig(noise_sigma=0.01),
            trial_verifier=VerifierSpec(id="camera", kind="local-embedder-gallery",
                                        embedder_id="fast-d", threshold=0.3),
            similarity_ids=("fast-c",),
            seed=7,
        )
        reports, _ = run_benchmark(plan, registry)
        cells = [r for r in reports if r.subject != POOLED_SUBJECT]
        assert len(cells) == 2
        assert all(r.trial_count == 25 for r in cells)

        csv_doc = render_report(reports, "csv")
        header = csv_doc.split("\n", 1)[0].split(",")
        metric_columns = header[2:]
        assert metric_columns == ["Sim. (fast-c)", "ASR", "Mean Conf."]

        reports2, _ = run_benchmark(plan, registry)
        assert render_report(reports2, "csv") == csv_doc


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_service_lifecycle_over_http(tmp_path):
    import httpx
    import uvicorn

    from dipa.service import JobStore, ServiceConfig, create_app

    with criterion("service lifecycle: HTTP round-trip, consent, crash requeue",
                   budget_seconds=90):
        registry = default_registry()
        for spec in FAST_SPECS:
            registry.register(spec)
        port = _free_port()
        cfg = ServiceConfig(job_dir=str(tmp_path / "jobs"), workers=1,
                            ensemble_ids=("fast-a", "fast-b"), port=port)
        server = uvicorn.Server(uvicorn.Config(create_app(cfg, registry=registry),
                                               host="127.0.0.1", port=port, log_level="warning"))
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        base = f"http://127.0.0.1:{port}"
        deadline = time.time() + 15
        while time.time() < deadline and not server.started:
            time.sleep(0.05)
        assert server.started

        try:
            buf = io.BytesIO()
            from PIL import Image

            img = synthetic_face(1, 48)
            Image.fromarray((np.asarray(img.data) * 255).astype(np.uint8)).save(buf, format="PNG")
            photo_bytes = buf.getvalue()

            # consent missing: rejected, nothing persisted
            r = httpx.post(f"{base}/api/jobs", files={"photo": ("f.png", photo_bytes, "image/png")},
                           data={"consent": "false"})
            assert r.status_code == 400
            assert list((tmp_path / "jobs").iterdir()) == []

            # 10-step config end to end in under 30 s
            t0 = time.monotonic()
            r = httpx.post(
                f"{base}/api/jobs",
                files={"photo": ("f.png", photo_bytes, "image/png")},
                data={"consent": "true",
                      "config": json.dumps({"steps": 10, "patch_side": 16, "count": 2})})
            assert r.status_code == 202
            job_id = r.json()["job_id"]
            status = None
            while time.monotonic() - t0 < 30:
                status = httpx.get(f"{base}/api/jobs/{job_id}").json()
                if status["status"] == "done":
                    break
                time.sleep(0.1)
            assert status == {"status": "done", "progress": 1.0}
            listing = httpx.get(f"{base}/api/jobs/{job_id}/patches").json()
            assert len(listing["patches"]) == 2
            png = httpx.get(base + listing["patches"][0]["url"])
            assert png.content[:4] == b"\x89PNG"
            assert time.monotonic() - t0 < 30
        finally:
            server.should_exit = True
            thread.join(timeout=15)

        # kill-and-restart mid-job on a test clock: the lease expires and the
        # job returns to the queue in a valid state
        clock_now = [5000.0]
        store = JobStore(tmp_path / "jobs2", clock=lambda: clock_now[0])
        job = store.submit(synthetic_face(1, 32),
                           default_attack_config(patch_side=12, pool_kernel=3, steps=10,
                                                 jitter_samples=1,
                                                 ensemble_ids=("fast-a",), seed=0),
                           1, consent=True)
        store.claim_next("doomed-worker", lease_seconds=60)
        assert store.get(job.id).status == "running"
        restarted = JobStore(tmp_path / "jobs2", clock=lambda: clock_now[0])
        clock_now[0] += 61
        assert restarted.requeue_expired() == [job.id]
        assert restarted.get(job.id).status == "queued"


def test_generate_determinism(tmp_path):
    with criterion("determinism: generate twice -> byte-identical patches"):
        face = tmp_path / "face.png"
        save_image(synthetic_face(1, 64), face)
        flags = ["--steps", "5", "--patch-side", "16", "--pool-kernel", "3",
                 "--scale", "0.5", "--jitter-dx", "0", "--jitter-dy", "0",
                 "--jitter-dscale", "0", "--jitter-drot", "0", "--jitter-samples", "1",
                 "--ensemble", "tiny-a", "tiny-b", "--seed", "42", "--count", "2"]
        for out in ("a", "b"):
            assert cli_main(["generate", "--image", str(face),
                             "--out", str(tmp_path / out), *flags]) == 0
        for k in range(2):
            assert (tmp_path / "a" / f"patch_{k}.png").read_bytes() == \
                   (tmp_path / "b" / f"patch_{k}.png").read_bytes()

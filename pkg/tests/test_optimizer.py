import numpy as np
import pytest
import torch

from dipa.embedders import Embedder, EmbedderSpec, load_ensemble
from dipa.imaging import total_variation
from dipa.synthetic import synthetic_face
from dipa.optimizer import (
    LossTrace,
    OptimizationError,
    clean_embeddings,
    dipa_loss,
    generate_patch_set,
    init_patch,
    optimize_patch,
)
from dipa.types import Jitter, Placement, default_attack_config, export_patch


def fast_cfg(**overrides):
    base = dict(
        patch_side=16, pool_kernel=3, pool_stride=1, steps=5, step_size=0.05,
        placement=Placement(center_x=0.5, center_y=0.6, scale=0.5, jitter=Jitter()),
        jitter_samples=1, ensemble_ids=("fast-a", "fast-b"), seed=11)
    variant = overrides.pop("variant", "dipa")
    base.update(overrides)
    return default_attack_config(variant=variant, **base)


class LinearEmbedder(Embedder):
    """normalize(W @ flatten(input)); admits a closed-form loss gradient."""

    def __init__(self, side=4, dim=8, seed=0):
        self.spec = EmbedderSpec(id=f"linear-{seed}", input_side=side, embedding_dim=dim,
                                 kind="synthetic-tiny", weights_ref=str(seed))
        rng = np.random.default_rng(seed)
        self.W = torch.tensor(rng.normal(size=(dim, side * side * 3)))

    def forward(self, x):
        x = self._check_input(x)
        e = self.W @ x.reshape(-1)
        return e / e.norm()


class NaNEmbedder(Embedder):
    def __init__(self, side=16, dim=4):
        self.spec = EmbedderSpec(id="nan", input_side=side, embedding_dim=dim,
                                 kind="synthetic-tiny", weights_ref="0")

    def forward(self, x):
        return torch.full((self.spec.embedding_dim,), float("nan"), dtype=torch.float64)


class TestDipaLoss:
    def test_lambda_zero_total_equals_similarity(self, registry, face64):
        ens = load_ensemble(["fast-a", "fast-b"], registry)
        cfg = fast_cfg()
        rng = np.random.default_rng(0)
        p = init_patch(cfg, rng)
        loss = dipa_loss(p, face64, ens, cfg, rng)
        assert float(loss.total) == loss.similarity
        assert loss.tv == 0.0

    def test_patch_equal_to_covered_region_gives_n(self, registry, rng):
        # full-coverage placement with kernel 1: the composite reproduces x
        # exactly, so each ensemble term is a self-similarity of 1
        ens = load_ensemble(["fast-a", "fast-b", "fast-c"], registry)
        x = rng.uniform(0, 1, (8, 8, 3))
        cfg = fast_cfg(patch_side=8, pool_kernel=1,
                       placement=Placement(center_x=0.5, center_y=0.5, scale=1.0),
                       ensemble_ids=("fast-a", "fast-b", "fast-c"))
        loss = dipa_loss(x.copy(), x, ens, cfg, np.random.default_rng(0))
        assert loss.similarity == pytest.approx(3.0, abs=1e-9)

    def test_duplicate_ensemble_member_doubles_term(self, registry, face64):
        single = load_ensemble(["fast-a"], registry)
        double = load_ensemble(["fast-a", "fast-a"], registry)
        cfg = fast_cfg(ensemble_ids=("fast-a",))
        p = init_patch(cfg, np.random.default_rng(1))
        s1 = dipa_loss(p, face64, single, cfg, np.random.default_rng(0)).similarity
        s2 = dipa_loss(p, face64, double, cfg, np.random.default_rng(0)).similarity
        assert s2 == pytest.approx(2 * s1, abs=1e-12)

    def test_empty_ensemble_rejected(self, face64):
        with pytest.raises(OptimizationError):
            dipa_loss(np.zeros((4, 4, 3)), face64, [], fast_cfg(), np.random.default_rng(0))

    def test_reference_override_changes_target(self, registry, face64):
        # dodging against a separate enrollment photo: the similarity term
        # must equal the cosine against the reference's embeddings
        from dipa.optimizer import clean_embeddings

        ens = load_ensemble(["fast-a"], registry)
        other = synthetic_face(4242, 64)
        cfg = fast_cfg(ensemble_ids=("fast-a",))
        p = init_patch(cfg, np.random.default_rng(1))
        with_ref = dipa_loss(p, face64, ens, cfg, np.random.default_rng(0), reference=other)
        manual = dipa_loss(p, face64, ens, cfg, np.random.default_rng(0),
                           clean=clean_embeddings(other, ens))
        assert with_ref.similarity == pytest.approx(manual.similarity, abs=1e-12)
        plain = dipa_loss(p, face64, ens, cfg, np.random.default_rng(0))
        assert with_ref.similarity != pytest.approx(plain.similarity, abs=1e-6)

    def test_tv_term_weighted(self, registry, face64, rng):
        ens = load_ensemble(["fast-a"], registry)
        cfg = fast_cfg(variant="dipa-tv", lambda_tv=0.5, ensemble_ids=("fast-a",))
        p = rng.uniform(0, 1, (16, 16, 3))
        loss = dipa_loss(p, face64, ens, cfg, np.random.default_rng(0))
        assert loss.tv == pytest.approx(0.5 * float(total_variation(p)), rel=1e-12)
        assert float(loss.total) == pytest.approx(loss.similarity + loss.tv, abs=1e-12)

    def test_linear_embedder_closed_form_gradient(self):
        # 1x1 patch covering exactly one pixel of an 8x8 image; the loss is
        # cos(normalize(W z(p)), e0) with z = 2*composite - 1 flattened
        emb = LinearEmbedder(side=8, dim=8, seed=5)
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (8, 8, 3))
        cfg = fast_cfg(patch_side=1, pool_kernel=1,
                       placement=Placement(center_x=0.4375, center_y=0.4375, scale=0.125),
                       ensemble_ids=("linear-5",))
        p0 = rng.uniform(0, 1, (1, 1, 3))

        p_t = torch.tensor(p0, requires_grad=True)
        loss = dipa_loss(p_t, x, [emb], cfg, np.random.default_rng(0))
        loss.total.backward()
        autograd = p_t.grad.numpy().reshape(3)

        W = emb.W.numpy()
        z0 = (2 * x - 1).reshape(-1)
        e0 = W @ z0
        e0 /= np.linalg.norm(e0)
        x_adv = x.copy()
        x_adv[3, 3, :] = p0[0, 0, :]
        z = (2 * x_adv - 1).reshape(-1)
        a = W @ z
        na = np.linalg.norm(a)
        dL_da = e0 / na - (a @ e0) * a / na**3
        pixel_flat = (3 * 8 + 3) * 3  # row 3, col 3, channel stride 3
        closed_form = np.array([2 * W[:, pixel_flat + c] @ dL_da for c in range(3)])
        assert np.allclose(autograd, closed_form, rtol=1e-10, atol=1e-12)


class TestOptimizePatch:
    def test_zero_steps_returns_seeded_init(self, registry, face64):
        cfg = fast_cfg(steps=0)
        patch, trace = optimize_patch(face64, load_ensemble(cfg.ensemble_ids, registry), cfg)
        expected = init_patch(cfg, np.random.default_rng(cfg.seed))
        assert np.array_equal(patch.data, expected)
        assert len(trace) == 1

    def test_trace_lengths_steps_plus_one(self, registry, face64):
        cfg = fast_cfg(steps=4)
        _, trace = optimize_patch(face64, load_ensemble(cfg.ensemble_ids, registry), cfg)
        assert len(trace.total) == len(trace.similarity) == len(trace.tv) == 5

    def test_descent_on_synthetic_ensemble(self, registry, face64):
        cfg = fast_cfg(patch_side=24, steps=40, ensemble_ids=("fast-a", "fast-b", "fast-c"))
        ens = load_ensemble(cfg.ensemble_ids, registry)
        _, trace = optimize_patch(face64, ens, cfg)
        assert trace.similarity[-1] < trace.similarity[0]
        assert trace.total[-1] < trace.total[0]

    def test_statistical_descent_over_ten_seeds(self, registry, face64):
        ens = load_ensemble(("fast-a", "fast-b", "fast-c"), registry)
        descended = 0
        for seed in range(10):
            cfg = fast_cfg(steps=15, seed=seed, ensemble_ids=("fast-a", "fast-b", "fast-c"))
            _, trace = optimize_patch(face64, ens, cfg)
            if trace.total[-1] < trace.total[0]:
                descended += 1
        assert descended >= 9

    def test_bit_reproducible_for_fixed_seed(self, registry, face64, tmp_path):
        cfg = fast_cfg(steps=6, seed=33)
        ens = load_ensemble(cfg.ensemble_ids, registry)
        a, _ = optimize_patch(face64, ens, cfg)
        b, _ = optimize_patch(face64, ens, cfg)
        assert np.array_equal(a.data, b.data)
        export_patch(a, tmp_path / "a.png")
        export_patch(b, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_projection_keeps_patch_in_unit_interval(self, registry, face64):
        # the run prefix property (same rng stream) makes each final state the
        # after-step-k state of a longer run
        ens = load_ensemble(("fast-a", "fast-b"), registry)
        for k in (1, 2, 3, 4):
            patch, _ = optimize_patch(face64, ens, fast_cfg(steps=k, step_size=0.5))
            assert patch.data.min() >= 0.0 and patch.data.max() <= 1.0

    def test_variant_equivalence_bit_identical(self, registry, face64):
        ens = load_ensemble(("fast-a", "fast-b"), registry)
        a, _ = optimize_patch(face64, ens, fast_cfg(variant="dipa", steps=6, seed=2))
        b, _ = optimize_patch(face64, ens, fast_cfg(variant="dipa-tv", lambda_tv=0.0, steps=6, seed=2))
        assert np.array_equal(a.data, b.data)

    def test_tv_regularization_lowers_final_tv(self, registry, face64):
        ens = load_ensemble(("fast-a", "fast-b"), registry)
        plain, _ = optimize_patch(face64, ens, fast_cfg(steps=50, seed=4))
        smooth, _ = optimize_patch(face64, ens, fast_cfg(variant="dipa-tv", lambda_tv=0.1, steps=50, seed=4))
        assert float(total_variation(smooth.data, eps=0)) <= float(total_variation(plain.data, eps=0))

    def test_non_finite_loss_aborts_with_step_diagnostic(self, face64):
        cfg = fast_cfg(ensemble_ids=("nan",))
        with pytest.raises(OptimizationError, match="step 0"):
            optimize_patch(face64, [NaNEmbedder()], cfg)

    def test_progress_callback_sees_every_step(self, registry, face64):
        seen = []
        cfg = fast_cfg(steps=3)
        optimize_patch(face64, load_ensemble(cfg.ensemble_ids, registry), cfg,
                       progress=lambda step, total: seen.append((step, total)))
        assert seen == [(1, 3), (2, 3), (3, 3)]


class TestGeneratePatchSet:
    def test_count_one_equals_single_run(self, registry, face64):
        cfg = fast_cfg(steps=4, seed=9)
        ens = load_ensemble(cfg.ensemble_ids, registry)
        single, _ = optimize_patch(face64, ens, cfg)
        [only] = generate_patch_set(face64, ens, cfg, count=1)
        assert np.array_equal(only.data, single.data)

    def test_distinct_patches_and_seed_sequence(self, registry, face64):
        cfg = fast_cfg(steps=3, seed=100)
        ens = load_ensemble(cfg.ensemble_ids, registry)
        patches = generate_patch_set(face64, ens, cfg, count=3)
        assert sorted(p.metadata.seed for p in patches) == [100, 101, 102]
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.abs(patches[i].data - patches[j].data).max() > 0

    def test_sorted_by_final_loss(self, registry, face64):
        cfg = fast_cfg(steps=3, seed=7)
        ens = load_ensemble(cfg.ensemble_ids, registry)
        patches = generate_patch_set(face64, ens, cfg, count=4)
        losses = [p.metadata.final_loss for p in patches]
        assert losses == sorted(losses)

    def test_failure_fails_whole_set(self, face64):
        cfg = fast_cfg(ensemble_ids=("nan",))
        with pytest.raises(OptimizationError):
            generate_patch_set(face64, [NaNEmbedder()], cfg, count=2)

    def test_count_below_one_rejected(self, registry, face64):
        with pytest.raises(ValueError):
            generate_patch_set(face64, load_ensemble(("fast-a",), registry), fast_cfg(), count=0)

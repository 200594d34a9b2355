import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from openmixer.dfa import (ActionClass, DynamicFusion, Vocabulary, align_scores, classify, dynamic_fuse,
                           ensemble_text_features)
from openmixer.errors import ConfigError, InputError
from oracles import grad_check


def unit(x):
    return x / x.norm(dim=-1, keepdim=True)


def rand(rng, *shape):
    return torch.tensor(rng.normal(size=shape))


class TestEnsemble:
    def test_single_prompt_unchanged(self, rng):
        f = unit(rand(rng, 1, 6))
        assert torch.allclose(ensemble_text_features([f])[0], f[0], atol=1e-15)

    def test_identical_prompts(self, rng):
        f = unit(rand(rng, 6))
        assert torch.allclose(ensemble_text_features([torch.stack([f] * 4)])[0], f, atol=1e-15)

    def test_antipodal_prompts_rejected(self, rng):
        f = unit(rand(rng, 6))
        with pytest.raises(InputError, match="degenerate"):
            ensemble_text_features([torch.stack([f, -f])])

    def test_empty_prompt_list(self):
        with pytest.raises(InputError):
            ensemble_text_features([torch.zeros(0, 4)])

    def test_rows_unit_norm_and_mean_direction(self, rng):
        per_class = [unit(rand(rng, k, 8)) for k in (1, 3, 16)]
        out = ensemble_text_features(per_class)
        assert torch.allclose(out.norm(dim=-1), torch.ones(3, dtype=torch.float64))
        for row, feats in zip(out, per_class):
            assert torch.allclose(row, unit(feats.mean(0)))

    def test_class_needs_prompt(self):
        with pytest.raises(InputError):
            ActionClass("run", [])


class TestVocabulary:
    def test_template(self):
        v = Vocabulary.from_names(["run"], "a video of person {CLS}")
        assert v.classes[0].prompts == ["a video of person run"]

    def test_duplicate_names(self):
        with pytest.raises(InputError):
            Vocabulary.from_names(["a", "a"])

    def test_subset_and_permutation(self, rng):
        v = Vocabulary.from_names(["a", "b", "c"], novel=["c"])
        v.text_features = rand(rng, 3, 4)
        p = v.permuted([2, 0, 1])
        assert p.names == ["c", "a", "b"] and p.novel_mask == [True, False, False]
        assert torch.equal(p.text_features[0], v.text_features[2])


class TestDynamicFuse:
    def test_lambda_one_gives_video_feature(self, rng):
        f_v = unit(rand(rng, 8))
        out = dynamic_fuse(rand(rng, 5, 8), f_v, 1.0)
        # rows are re-normalized, so the reference is f_v pushed through the same normalization
        assert torch.equal(out, unit(f_v).expand(5, 8))

    def test_lambda_zero_gives_projected_queries(self, rng):
        q = rand(rng, 5, 8)
        out = dynamic_fuse(q, unit(rand(rng, 8)), 0.0)
        assert torch.allclose(out, unit(q), atol=1e-15)

    def test_half_lambda_rescales(self, rng):
        u = unit(rand(rng, 6))
        out = dynamic_fuse(torch.zeros(1, 6, dtype=torch.float64), 2 * u, 0.5)
        assert torch.allclose(out[0], u, atol=1e-15)

    def test_per_query_lambda(self, rng):
        f_v = unit(rand(rng, 4))
        q = rand(rng, 3, 4)
        out = dynamic_fuse(q, f_v, torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64))
        assert torch.equal(out[0], unit(f_v)) and torch.equal(out[2], unit(f_v))
        assert torch.allclose(out[1], unit(q[1]))

    def test_query_scale_does_not_shift_the_mix(self, rng):
        q, f_v = rand(rng, 5, 8), unit(rand(rng, 8))
        out = dynamic_fuse(q, f_v, 0.5)
        assert torch.allclose(dynamic_fuse(1000 * q, f_v, 0.5), out, atol=1e-12)
        assert torch.allclose(out, unit(f_v + unit(q)), atol=1e-12)

    def test_batched(self, rng):
        q, f_v = rand(rng, 2, 5, 4), unit(rand(rng, 2, 4))
        out = dynamic_fuse(q, f_v, 0.3)
        for b in range(2):
            assert torch.allclose(out[b], dynamic_fuse(q[b], f_v[b], 0.3))


class TestAlignScores:
    def test_equal_similarities_uniform(self):
        probs, _ = align_scores(torch.ones(2, 3, dtype=torch.float64) / math.sqrt(3),
                                torch.eye(3, dtype=torch.float64), 0.07)
        assert torch.allclose(probs, torch.full((2, 3), 1 / 3, dtype=torch.float64))

    def test_sharp_alignment(self):
        c = 5
        text = torch.eye(c, dtype=torch.float64)
        probs, _ = align_scores(text[2:3], text, 0.01)
        expected = math.exp(100) / (math.exp(100) + (c - 1))
        assert probs[0, 2].item() == pytest.approx(expected, rel=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            align_scores(torch.ones(1, 2), torch.ones(1, 2), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 10.0))
    def test_rows_sum_to_one_and_argmax_tau_invariant(self, seed, tau):
        g = torch.Generator().manual_seed(seed)
        fused = unit(torch.randn(4, 6, generator=g, dtype=torch.float64))
        text = unit(torch.randn(5, 6, generator=g, dtype=torch.float64))
        probs, logits = align_scores(fused, text, tau)
        assert (probs >= 0).all()
        assert torch.allclose(probs.sum(-1), torch.ones(4, dtype=torch.float64), atol=1e-6)
        assert torch.equal(probs.argmax(-1), (fused @ text.T).argmax(-1))
        assert torch.equal(logits.argmax(-1), (logits * 3.5).argmax(-1))

    def test_vocabulary_permutation_permutes_columns(self, rng):
        fused, text = unit(rand(rng, 4, 6)), unit(rand(rng, 5, 6))
        perm = torch.as_tensor(rng.permutation(5))
        _, logits = align_scores(fused, text, 0.07)
        _, permuted = align_scores(fused, text[perm], 0.07)
        assert torch.equal(permuted, logits[:, perm])


class TestFusionModule:
    def test_initial_lambda_half(self):
        assert torch.equal(DynamicFusion(4, 8, 6).lam, torch.full((4,), 0.5))

    def test_dynamic_lambda_in_open_interval(self):
        fusion = DynamicFusion(3, 4, 4)
        with torch.no_grad():
            fusion.lambda_raw.copy_(torch.tensor([-30.0, 0.0, 15.0]))
        lam = fusion.lam
        assert ((lam > 0) & (lam < 1)).all()

    def test_fixed_mode(self):
        fusion = DynamicFusion(3, 4, 4, mode="fixed", fixed_lambda=0.0)
        assert torch.equal(fusion.lam, torch.zeros(3))
        with pytest.raises(ConfigError):
            DynamicFusion(3, 4, 4, mode="fixed", fixed_lambda=1.5)
        with pytest.raises(ConfigError):
            DynamicFusion(3, 4, 4, mode="concat")


class TestClassify:
    def _fusion(self, **kw):
        torch.manual_seed(0)
        return DynamicFusion(4, 6, 5, **kw).double()

    def test_lambda_one_is_zero_shot_path(self, rng):
        fusion = self._fusion(mode="fixed", fixed_lambda=1.0)
        f_v, text = unit(rand(rng, 5)), unit(rand(rng, 3, 5))
        logits = classify(rand(rng, 4, 6), f_v, text, fusion, 0.07)
        # video-level cosine scores with f_v repeated once per query; a 1-row product can
        # take a different BLAS kernel and differ in the last bit
        zero_shot = (unit(f_v).expand(4, 5) @ text.T) / 0.07
        assert torch.equal(logits, zero_shot)
        assert torch.equal(logits, logits[:1].expand(4, 3))

    def test_independent_of_spatial_queries(self, rng):
        # classify never receives spatial queries, so any change there is invisible
        fusion = self._fusion()
        q_t, f_v, text = rand(rng, 4, 6), unit(rand(rng, 5)), unit(rand(rng, 3, 5))
        assert torch.equal(classify(q_t, f_v, text, fusion, 0.1), classify(q_t.clone(), f_v, text, fusion, 0.1))

    def test_margin_sign_follows_video_feature(self):
        text = torch.eye(2, 5, dtype=torch.float64)
        fusion = self._fusion(mode="fixed", fixed_lambda=1.0)
        fusion_q = torch.zeros(1, 6, dtype=torch.float64)
        for f_v, sign in ((text[0], 1), (text[1], -1)):
            logits = classify(fusion_q, f_v, text, fusion, 0.1)[0]
            assert sign * (logits[0] - logits[1]).item() > 0


class TestGradients:
    def test_dynamic_fuse(self, rng):
        fusion = DynamicFusion(3, 4, 5).double()
        with torch.no_grad():
            fusion.projection.weight.copy_(rand(rng, 5, 4))
            fusion.lambda_raw.copy_(rand(rng, 3))
        f_v, w, q = unit(rand(rng, 5)), rand(rng, 3, 5), rand(rng, 3, 4)
        assert grad_check(lambda x: (fusion(x, f_v) * w).sum(), q) < 1e-4
        assert grad_check(lambda v: (fusion(q, v) * w).sum(), f_v) < 1e-4

    def test_align_scores(self, rng):
        text = unit(rand(rng, 4, 5))
        targets = torch.tensor([1, 3, 0])
        ce = torch.nn.functional.cross_entropy
        assert grad_check(lambda f: ce(align_scores(f, text, 0.2)[1], targets), rand(rng, 3, 5)) < 1e-4
        fused = unit(rand(rng, 3, 5))
        assert grad_check(lambda t: ce(align_scores(fused, t, 0.2)[1], targets), rand(rng, 4, 5)) < 1e-4

    def test_cross_entropy_through_fusion_and_alignment(self, rng):
        fusion = DynamicFusion(3, 4, 5).double()
        with torch.no_grad():
            fusion.projection.weight.copy_(rand(rng, 5, 4))
        f_v, text = unit(rand(rng, 5)), unit(rand(rng, 4, 5))
        targets = torch.tensor([2, 0, 1])

        def loss(q):
            return torch.nn.functional.cross_entropy(classify(q, f_v, text, fusion, 0.1), targets)

        assert grad_check(loss, rand(rng, 3, 4)) < 1e-4
        q = rand(rng, 3, 4)

        def by_lambda(raw):
            fused = dynamic_fuse(q, f_v, torch.sigmoid(raw), fusion.projection)
            return torch.nn.functional.cross_entropy(align_scores(fused, text, 0.1)[1], targets)

        assert grad_check(by_lambda, rand(rng, 3)) < 1e-4

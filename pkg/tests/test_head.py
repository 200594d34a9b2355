import copy
import math

import pytest
import torch

from openmixer.backend import PyramidParams, build_pyramid
from openmixer.errors import ConfigError
from openmixer.head import (CascadeHead, HeadConfig, QQMix, QVMix, SpatialBlock, TemporalBlock, canonical_order,
                            update_boxes)
from oracles import grad_check

DT = torch.float64


def tiny_cfg(**kw):
    base = dict(num_queries=4, num_stages=3, query_dim=8, pyramid_dim=4, qv_points=3, heads=2)
    base.update(kw)
    return HeadConfig(**base)


def randomize(module, std=0.3, seed=0):
    """Replace every parameter (including zero-initialized ones) with random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return module


def make_inputs(n=4, b=1, t=3, grid=4, embed=6, feat=4, seed=0, dtype=DT):
    g = torch.Generator().manual_seed(seed)
    params = randomize(PyramidParams(embed, feat).to(dtype), seed=seed + 1)
    pyramid = build_pyramid(torch.randn(b, t, grid, grid, embed, generator=g, dtype=dtype), params)
    boxes = torch.cat([torch.rand(b, n, 2, generator=g, dtype=dtype) * 0.6 + 0.2,
                       torch.rand(b, n, 2, generator=g, dtype=dtype) * 0.4 + 0.2], dim=-1)
    return pyramid, boxes


def layer_norm(x, module):
    return torch.nn.functional.layer_norm(x, x.shape[-1:], module.weight, module.bias, module.eps)


class TestUpdateBoxes:
    def test_zero_offsets(self):
        b = torch.tensor([[[0.3, 0.6, 0.2, 0.5]]])
        assert torch.equal(update_boxes(b, torch.zeros(1, 1, 4)), b)
        assert torch.equal(update_boxes(update_boxes(b, torch.zeros(1, 1, 4)), torch.zeros(1, 1, 4)), b)

    def test_log_scale_width(self):
        out = update_boxes(torch.tensor([[0.5, 0.5, 1.0, 1.0]], dtype=DT),
                           torch.tensor([[0.0, 0.0, math.log(0.5), 0.0]], dtype=DT))
        assert out[0, 2].item() == pytest.approx(0.5, abs=1e-15)

    def test_centre_shift_scales_with_size(self):
        out = update_boxes(torch.tensor([[0.5, 0.5, 0.2, 0.4]]), torch.tensor([[0.5, -0.5, 0.0, 0.0]]))
        assert torch.allclose(out, torch.tensor([[0.6, 0.3, 0.2, 0.4]]))

    def test_clamped(self, rng):
        deltas = torch.tensor(rng.normal(scale=20, size=(50, 4)))
        out = update_boxes(torch.tensor(rng.uniform(0.05, 1, size=(50, 4))), deltas)
        assert ((out[:, :2] >= 0) & (out[:, :2] <= 1)).all()
        assert ((out[:, 2:] >= 1e-4) & (out[:, 2:] <= 1)).all()


class TestQQMix:
    def test_single_query(self):
        mix = randomize(QQMix(8, 2).double())
        q = torch.randn(1, 1, 8, dtype=DT)
        boxes = torch.tensor([[[0.5, 0.5, 0.3, 0.3]]], dtype=DT)
        v = mix.qkv(q)[..., 16:]
        assert torch.allclose(mix(q, boxes), layer_norm(q + mix.out(v), mix.norm), atol=1e-14)

    def test_zero_output_projection(self):
        mix = randomize(QQMix(8, 2).double())
        torch.nn.init.zeros_(mix.out.weight)
        torch.nn.init.zeros_(mix.out.bias)
        q = torch.randn(2, 5, 8, dtype=DT)
        _, boxes = make_inputs(n=5, b=2)
        assert torch.equal(mix(q, boxes), mix.norm(q))

    def test_permutation_equivariant(self):
        mix = randomize(QQMix(8, 2).double())
        q = torch.randn(1, 6, 8, dtype=DT)
        _, boxes = make_inputs(n=6)
        perm = torch.randperm(6)
        assert torch.allclose(mix(q, boxes)[:, perm], mix(q[:, perm], boxes[:, perm]), atol=1e-14)

    def test_geometry_bias_matters(self):
        mix = randomize(QQMix(8, 2).double())
        q = torch.randn(1, 4, 8, dtype=DT)
        _, boxes = make_inputs(n=4)
        moved = boxes.clone()
        moved[0, 0, :2] += 0.1
        assert not torch.allclose(mix(q, boxes), mix(q, moved))

    def test_gradients(self):
        mix = randomize(QQMix(8, 2).double())
        q = torch.randn(1, 3, 8, dtype=DT)
        _, boxes = make_inputs(n=3)
        w = torch.randn(1, 3, 8, dtype=DT)
        assert grad_check(lambda x: (mix(x, boxes) * w).sum(), q) < 1e-4
        for name in ("geo_scale", "qkv.weight"):
            param = mix.get_parameter(name)

            def by_param(value, name=name):
                return (torch.func.functional_call(mix, {name: value}, (q, boxes)) * w).sum()

            assert grad_check(by_param, param.detach()) < 1e-4


class TestQVMix:
    def test_zero_generators_give_layer_norm(self):
        mix = randomize(QVMix(8, 4, num_points=3).double())
        mix.zero_generators()
        pyramid, boxes = make_inputs(n=4, b=2)
        q = torch.randn(2, 4, 8, dtype=DT)
        assert torch.equal(mix(q, pyramid, boxes, 1), mix.norm(q))

    def test_constant_field_ignores_box_location(self):
        mix = randomize(QVMix(8, 4, num_points=3).double())
        pyramid, boxes = make_inputs(n=4)
        for _, level in pyramid.levels:
            level.data = torch.ones_like(level) * torch.arange(4, dtype=DT)[None, :, None, None, None]
        q = torch.randn(1, 4, 8, dtype=DT)
        shifted = boxes.clone()
        shifted[..., :2] = 1 - shifted[..., :2]
        assert torch.allclose(mix(q, pyramid, boxes, 1), mix(q, pyramid, shifted, 1), atol=1e-14)

    def test_sampling_shape(self):
        mix = QVMix(8, 4, num_points=5).double()
        pyramid, boxes = make_inputs(n=3, b=2)
        assert mix.sample(torch.randn(2, 3, 8, dtype=DT), pyramid, boxes, 1).shape == (2, 3, 5, 4)

    def test_gradients(self):
        mix = randomize(QVMix(8, 4, num_points=3).double())
        pyramid, boxes = make_inputs(n=2)
        q = torch.randn(1, 2, 8, dtype=DT)
        w = torch.randn(1, 2, 8, dtype=DT)
        assert grad_check(lambda x: (mix(x, pyramid, boxes, 1) * w).sum(), q) < 1e-4
        for name in ("channel_gen.weight", "spatial_gen.bias", "offset_gen.weight"):
            param = mix.get_parameter(name)

            def by_param(value, name=name):
                return (torch.func.functional_call(mix, {name: value}, (q, pyramid, boxes, 1)) * w).sum()

            assert grad_check(by_param, param.detach()) < 1e-4


class TestSpatialBlock:
    def test_zeroed_score_head(self):
        block = randomize(SpatialBlock(8, 4, heads=2, num_points=3).double())
        torch.nn.init.zeros_(block.score_head.last.weight)
        torch.nn.init.zeros_(block.score_head.last.bias)
        pyramid, boxes = make_inputs(n=4)
        _, scores, _ = block(torch.randn(1, 4, 8, dtype=DT), pyramid, boxes, 1)
        assert torch.equal(scores, torch.full_like(scores, 0.5))

    def test_fresh_block_keeps_boxes(self):
        block = SpatialBlock(8, 4, heads=2, num_points=3).double()
        pyramid, boxes = make_inputs(n=4)
        _, scores, deltas = block(torch.randn(1, 4, 8, dtype=DT), pyramid, boxes, 1)
        assert torch.equal(update_boxes(boxes, deltas), boxes)
        assert ((scores > 0) & (scores < 1)).all()


class TestTemporalBlock:
    def _block(self, mode):
        return randomize(TemporalBlock(8, 4, 6, mode, heads=2, num_points=3).double())

    def test_zero_video_feature_matches_none(self):
        pre, none = self._block("pre_video"), self._block("none")
        pyramid, boxes = make_inputs(n=4)
        q = torch.randn(1, 4, 8, dtype=DT)
        zero = torch.zeros(1, 6, dtype=DT)
        assert torch.equal(pre(q, pyramid, boxes, 1, zero), none(q, pyramid, boxes, 1, zero))

    def test_pre_and_post_with_zero_generators(self):
        pre, post = self._block("pre_video"), self._block("post_video")
        pre.qv.zero_generators()
        post.qv.zero_generators()
        pyramid, boxes = make_inputs(n=4)
        q = torch.randn(1, 4, 8, dtype=DT)
        f_v = torch.randn(1, 6, dtype=DT)
        x = pre.qq(q, boxes)
        cond = pre.cond_proj(f_v)[:, None]
        assert torch.equal(pre(q, pyramid, boxes, 1, f_v), pre.qv.norm(x + cond))
        assert torch.equal(post(q, pyramid, boxes, 1, f_v), post.qv.norm(x) + cond)

    def test_condition_broadcast_to_all_queries(self):
        post = self._block("post_video")
        post.qv.zero_generators()
        pyramid, boxes = make_inputs(n=4)
        q = torch.randn(1, 4, 8, dtype=DT)
        f_v = torch.randn(1, 6, dtype=DT)
        diff = post(q, pyramid, boxes, 1, f_v) - post(q, pyramid, boxes, 1, torch.zeros_like(f_v))
        assert torch.allclose(diff, diff[:, :1].expand_as(diff), atol=1e-14)

    def test_pre_text_needs_feature(self):
        block = self._block("pre_text")
        pyramid, boxes = make_inputs(n=2)
        with pytest.raises(ConfigError):
            block(torch.randn(1, 2, 8, dtype=DT), pyramid, boxes, 1, torch.zeros(1, 6, dtype=DT))

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            TemporalBlock(8, 4, 6, "sideways")
        with pytest.raises(ConfigError):
            HeadConfig(condition_mode="sideways")


def run_head(head, pyramid, boxes, text, f_v, **kw):
    return head(pyramid, boxes, 1, f_v, text, 0.07, matched_text=f_v, **kw)


class TestCascade:
    def _setup(self, n=4, seed=0, **kw):
        torch.manual_seed(seed)
        head = CascadeHead(tiny_cfg(num_queries=n, **kw), 6).double()
        for stage in head.stages:
            torch.nn.init.normal_(stage.spatial.delta_head.last.weight, std=0.2)
            torch.nn.init.normal_(stage.fusion.lambda_raw)
        pyramid, boxes = make_inputs(n=n, b=2, seed=seed)
        g = torch.Generator().manual_seed(seed + 7)
        return head, pyramid, boxes, torch.randn(3, 6, generator=g, dtype=DT), torch.randn(2, 6, generator=g, dtype=DT)

    @pytest.mark.parametrize("stages", [1, 3])
    def test_stage_outputs(self, stages):
        head, pyramid, boxes, text, f_v = self._setup(num_stages=stages)
        states = run_head(head, pyramid, boxes, text, f_v)
        assert [s.stage for s in states] == list(range(1, stages + 1))
        for s in states:
            assert s.boxes.shape == (2, 4, 4) and s.action_logits.shape == (2, 4, 3)
            assert ((s.boxes[..., :2] >= 0) & (s.boxes[..., :2] <= 1)).all()
            assert ((s.boxes[..., 2:] > 0) & (s.boxes[..., 2:] <= 1)).all()
            assert ((s.person_scores >= 0) & (s.person_scores <= 1)).all()

    def test_stages_chain_boxes(self):
        head, pyramid, boxes, text, f_v = self._setup(num_stages=2)
        first, second = run_head(head, pyramid, boxes, text, f_v)
        with torch.no_grad():
            _, _, deltas = head.stages[1].spatial(first.spatial_queries, pyramid, first.boxes, 1)
        assert torch.allclose(second.boxes, update_boxes(first.boxes, deltas), atol=1e-14)

    @pytest.mark.parametrize("n", [1, 4, 7])
    @pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
    def test_query_permutation_equivariance_exact(self, n, dtype):
        head, pyramid, boxes, text, f_v = self._setup(n=n)
        head, boxes, text, f_v = head.to(dtype), boxes.to(dtype), text.to(dtype), f_v.to(dtype)
        pyramid.levels = [(s, m.to(dtype)) for s, m in pyramid.levels]
        perm = torch.randperm(n)
        permuted = copy.deepcopy(head)
        with torch.no_grad():
            permuted.spatial_init.copy_(head.spatial_init[perm])
            permuted.temporal_init.copy_(head.temporal_init[perm])
            for a, b in zip(head.stages, permuted.stages):
                b.fusion.lambda_raw.copy_(a.fusion.lambda_raw[perm])
            ref = run_head(head, pyramid, boxes, text, f_v)
            out = run_head(permuted, pyramid, boxes[:, perm], text, f_v)
        for a, b in zip(ref, out):
            for field in ("spatial_queries", "temporal_queries", "boxes", "person_scores", "action_logits"):
                assert torch.equal(getattr(a, field)[:, perm], getattr(b, field))

    @pytest.mark.parametrize("mode", ["pre_video", "post_video", "pre_text", "none"])
    def test_vocabulary_permutation(self, mode):
        head, pyramid, boxes, text, f_v = self._setup(condition_mode=mode)
        perm = torch.tensor([2, 0, 1])
        with torch.no_grad():
            ref = run_head(head, pyramid, boxes, text, f_v)
            out = run_head(head, pyramid, boxes, text[perm], f_v)
        for a, b in zip(ref, out):
            assert torch.equal(a.boxes, b.boxes) and torch.equal(a.person_scores, b.person_scores)
            assert torch.equal(a.action_logits[..., perm], b.action_logits)

    def test_canonical_order_is_permutation_invariant(self, rng):
        x = torch.tensor(rng.normal(size=(2, 6, 3)))
        perm = torch.as_tensor(rng.permutation(6))
        a, b = canonical_order(x), canonical_order(x[:, perm])
        assert torch.equal(x.gather(1, a[..., None].expand(-1, -1, 3)),
                           x[:, perm].gather(1, b[..., None].expand(-1, -1, 3)))

    def test_temporal_query_gradients(self):
        head, pyramid, boxes, text, f_v = self._setup(n=3, num_stages=2)
        randomize(head, std=0.2)
        w = torch.randn(2, 3, 3, dtype=DT)

        def loss(q_t):
            states = run_head(head, pyramid, boxes, text, f_v, temporal_queries=q_t)
            return sum((s.action_logits * w).sum() for s in states) * 0.01

        assert grad_check(loss, head.temporal_init.detach().expand(2, -1, -1).clone()) < 1e-4

    def test_spatial_query_gradients(self):
        # one stage: later stages see detached boxes, so finite differences through the
        # whole cascade would include a path autograd deliberately cuts
        head, pyramid, boxes, text, f_v = self._setup(n=3, num_stages=1)
        randomize(head, std=0.2)

        def loss(q_s):
            (state,) = run_head(head, pyramid, boxes, text, f_v, spatial_queries=q_s)
            return state.person_scores.sum() + state.boxes.sum()

        assert grad_check(loss, head.spatial_init.detach().expand(2, -1, -1).clone()) < 1e-4

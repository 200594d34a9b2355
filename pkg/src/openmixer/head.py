"""Cascaded spatial / temporal query-mixing blocks.

All modules take batched inputs: queries B x N x D_q, boxes B x N x 4 in normalized
(cx, cy, w, h). Pyramid levels are B x D_p x T x h_l x w_l.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .box_ops import cxcywh_to_xyxy, generalized_box_iou
from .dfa import DynamicFusion, align_scores
from .errors import ConfigError

CONDITION_MODES = ("pre_video", "post_video", "pre_text", "none")
BOX_EPS = 1e-4


@dataclass
class HeadConfig:
    num_queries: int = 100
    num_stages: int = 3
    condition_mode: str = "pre_video"
    qv_points: int = 32
    heads: int = 8
    query_dim: int = 256
    pyramid_dim: int = 256
    fusion_mode: str = "dynamic"
    fixed_lambda: float = 0.5

    def __post_init__(self):
        if self.condition_mode not in CONDITION_MODES:
            raise ConfigError(f"unknown condition mode {self.condition_mode!r}")
        if self.num_stages < 1 or self.num_queries < 1:
            raise ConfigError("num_stages and num_queries must be positive")
        if self.query_dim % self.heads:
            raise ConfigError("query_dim must be divisible by heads")


@dataclass
class QueryState:
    """Outputs of one cascade stage (batched)."""

    spatial_queries: torch.Tensor
    temporal_queries: torch.Tensor
    boxes: torch.Tensor          # B x N x 4
    person_scores: torch.Tensor  # B x N
    action_logits: torch.Tensor  # B x N x C
    stage: int

    @property
    def action_probs(self):
        return self.action_logits.softmax(-1)


def update_boxes(boxes, deltas, eps=BOX_EPS):
    """Refine boxes: centre shifts scale with the current size, sizes update in log space."""
    cx, cy, w, h = boxes.unbind(-1)
    dx, dy, dw, dh = deltas.unbind(-1)
    cx = (cx + dx * w).clamp(0.0, 1.0)
    cy = (cy + dy * h).clamp(0.0, 1.0)
    w = (w * torch.exp(dw)).clamp(eps, 1.0)
    h = (h * torch.exp(dh)).clamp(eps, 1.0)
    return torch.stack([cx, cy, w, h], dim=-1)


class MLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, layers=2):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x

    @property
    def last(self):
        return self.layers[-1]


class QQMix(nn.Module):
    """Self-attention among queries with a GIoU-derived bias on the attention logits."""

    def __init__(self, dim, heads=8):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        # per-head affine map of pairwise GIoU
        self.geo_scale = nn.Parameter(torch.ones(heads))
        self.geo_shift = nn.Parameter(torch.zeros(heads))
        self.norm = nn.LayerNorm(dim)

    def forward(self, queries, boxes):
        b, n, d = queries.shape
        hd = d // self.heads
        qkv = self.qkv(queries).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        corners = cxcywh_to_xyxy(boxes)
        giou = generalized_box_iou(corners, corners)  # B N N
        bias = self.geo_scale[:, None, None] * giou[:, None] + self.geo_shift[:, None, None]
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd) + bias
        attn = logits.softmax(dim=-1) @ v
        attn = attn.transpose(1, 2).reshape(b, n, d)
        return self.norm(queries + self.out(attn))


class QVMix(nn.Module):
    """Adaptive sampling of the pyramid followed by query-conditioned channel and point mixing.

    Each query generates P (x, y, t) sampling offsets relative to its box and keyframe,
    soft weights over pyramid levels, a D_p x D_p channel-mixing matrix and a P x P
    point-mixing matrix.
    """

    def __init__(self, dim, feat_dim, num_points=32, num_levels=4):
        super().__init__()
        self.num_points = num_points
        self.num_levels = num_levels
        self.feat_dim = feat_dim
        self.offset_gen = nn.Linear(dim, num_points * 3)
        self.level_gen = nn.Linear(dim, num_points * num_levels)
        self.channel_gen = nn.Linear(dim, feat_dim * feat_dim)
        self.spatial_gen = nn.Linear(dim, num_points * num_points)
        self.out = nn.Linear(num_points * feat_dim, dim, bias=False)
        self.norm = nn.LayerNorm(dim)
        self._init_sampling()

    def _init_sampling(self):
        nn.init.zeros_(self.offset_gen.weight)
        nn.init.zeros_(self.level_gen.weight)
        nn.init.zeros_(self.level_gen.bias)
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            xy = torch.rand(self.num_points, 2, generator=g) - 0.5
            t = (torch.rand(self.num_points, 1, generator=g) - 0.5) * 4.0
            self.offset_gen.bias.copy_(torch.cat([xy, t], dim=1).reshape(-1))

    def zero_generators(self):
        with torch.no_grad():
            for gen in (self.channel_gen, self.spatial_gen):
                gen.weight.zero_()
                gen.bias.zero_()

    def sample(self, queries, pyramid, boxes, keyframe_index):
        """Bilinearly sample the pyramid: returns B x N x P x D_p."""
        b, n, _ = queries.shape
        p = self.num_points
        offsets = self.offset_gen(queries).reshape(b, n, p, 3)
        cx, cy, w, h = (c[..., None] for c in boxes.unbind(-1))
        x = cx + offsets[..., 0] * w
        y = cy + offsets[..., 1] * h
        maps = pyramid.maps
        t_len = maps[0].shape[2]
        t_key = (2 * keyframe_index + 1) / t_len - 1
        t = t_key + offsets[..., 2] * (2.0 / t_len)
        grid = torch.stack([2 * x - 1, 2 * y - 1, t], dim=-1).reshape(b, n, p, 1, 3)
        level_w = self.level_gen(queries).reshape(b, n, p, self.num_levels).softmax(dim=-1)
        sampled = 0
        for l, fmap in enumerate(maps):
            s = F.grid_sample(fmap, grid.to(fmap.dtype), mode="bilinear", padding_mode="border",
                              align_corners=False)  # B C N P 1
            s = s[..., 0].permute(0, 2, 3, 1)
            sampled = sampled + s * level_w[..., l:l + 1]
        return sampled

    def forward(self, queries, pyramid, boxes, keyframe_index):
        b, n, _ = queries.shape
        p, c = self.num_points, self.feat_dim
        x = self.sample(queries, pyramid, boxes, keyframe_index)
        m_c = self.channel_gen(queries).reshape(b, n, c, c)
        x = F.relu(x @ m_c / math.sqrt(c))
        m_s = self.spatial_gen(queries).reshape(b, n, p, p)
        x = F.relu(m_s @ x / math.sqrt(p))
        return self.norm(queries + self.out(x.reshape(b, n, p * c)))


class SpatialBlock(nn.Module):
    """Localization block: mixes spatial queries, predicts person scores and box offsets."""

    def __init__(self, dim, feat_dim, heads=8, num_points=32, num_levels=4):
        super().__init__()
        self.qq = QQMix(dim, heads)
        self.qv = QVMix(dim, feat_dim, num_points, num_levels)
        self.score_head = MLP(dim, dim, 1)
        self.delta_head = MLP(dim, dim, 4)
        nn.init.zeros_(self.delta_head.last.weight)
        nn.init.zeros_(self.delta_head.last.bias)

    def forward(self, queries, pyramid, boxes, keyframe_index):
        q = self.qv(self.qq(queries, boxes), pyramid, boxes, keyframe_index)
        scores = torch.sigmoid(self.score_head(q)[..., 0])
        deltas = self.delta_head(q)
        return q, scores, deltas


class TemporalBlock(nn.Module):
    """Recognition block: temporal queries mixed with the pyramid under a semantic condition."""

    def __init__(self, dim, feat_dim, embed_dim, condition_mode="pre_video", heads=8,
                 num_points=32, num_levels=4):
        super().__init__()
        if condition_mode not in CONDITION_MODES:
            raise ConfigError(f"unknown condition mode {condition_mode!r}")
        self.condition_mode = condition_mode
        self.qq = QQMix(dim, heads)
        self.qv = QVMix(dim, feat_dim, num_points, num_levels)
        self.cond_proj = nn.Linear(embed_dim, dim, bias=False)

    def forward(self, queries, pyramid, boxes, keyframe_index, video_feature, text_feature=None):
        mode = self.condition_mode
        x = self.qq(queries, boxes)
        if mode == "pre_video":
            x = x + self.cond_proj(video_feature)[:, None, :]
        elif mode == "pre_text":
            if text_feature is None:
                raise ConfigError("pre_text conditioning needs the pre-matched text feature")
            x = x + self.cond_proj(text_feature)[:, None, :]
        x = self.qv(x, pyramid, boxes, keyframe_index)
        if mode == "post_video":
            x = x + self.cond_proj(video_feature)[:, None, :]
        return x


class Stage(nn.Module):
    def __init__(self, cfg: HeadConfig, embed_dim):
        super().__init__()
        self.spatial = SpatialBlock(cfg.query_dim, cfg.pyramid_dim, cfg.heads, cfg.qv_points)
        self.temporal = TemporalBlock(cfg.query_dim, cfg.pyramid_dim, embed_dim, cfg.condition_mode,
                                      cfg.heads, cfg.qv_points)
        self.fusion = DynamicFusion(cfg.num_queries, cfg.query_dim, embed_dim, cfg.fusion_mode,
                                    cfg.fixed_lambda)


def canonical_order(*per_query):
    """Lexicographic order of query slots by their initial state, one row of B x N.

    Floating-point reductions over queries depend on slot order; running every batch
    element in this order makes the cascade exactly equivariant to slot permutations.
    """
    keys = torch.cat([x.detach().reshape(x.shape[0], x.shape[1], -1).double() for x in per_query], dim=-1)
    keys = keys.cpu().numpy()
    order = [np.lexsort(k.T[::-1]) for k in keys]
    return torch.as_tensor(np.stack(order), device=per_query[0].device)


def _gather(x, order):
    return torch.gather(x, 1, order[..., None].expand(-1, -1, x.shape[-1]))


class CascadeHead(nn.Module):
    """M cascaded blocks sharing nothing but the initial queries' role.

    Stage m refines boxes from stage m - 1 (the first stage starts from prior boxes),
    then updates the temporal queries on the refined boxes and classifies them.
    """

    def __init__(self, cfg: HeadConfig, embed_dim):
        super().__init__()
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.spatial_init = nn.Parameter(torch.randn(cfg.num_queries, cfg.query_dim))
        self.temporal_init = nn.Parameter(torch.randn(cfg.num_queries, cfg.query_dim))
        self.stages = nn.ModuleList(Stage(cfg, embed_dim) for _ in range(cfg.num_stages))

    def forward(self, pyramid, init_boxes, keyframe_index, video_feature, text_features, tau,
                matched_text=None, spatial_queries=None, temporal_queries=None):
        b = init_boxes.shape[0]
        q_s = self.spatial_init.expand(b, -1, -1) if spatial_queries is None else spatial_queries
        q_t = self.temporal_init.expand(b, -1, -1) if temporal_queries is None else temporal_queries
        lambdas = [stage.fusion.lambda_raw.expand(b, -1)[..., None] for stage in self.stages]
        # temporal keys first, so the recognition path's order never depends on spatial queries
        order = canonical_order(q_t, *lambdas, q_s, init_boxes)
        restore = torch.argsort(order, dim=1)
        q_s, q_t, boxes = _gather(q_s, order), _gather(q_t, order), _gather(init_boxes, order)
        states = []
        for m, stage in enumerate(self.stages, start=1):
            prev = boxes.detach()
            q_s, scores, deltas = stage.spatial(q_s, pyramid, prev, keyframe_index)
            boxes = update_boxes(prev, deltas)
            q_t = stage.temporal(q_t, pyramid, boxes.detach(), keyframe_index, video_feature, matched_text)
            fused = stage.fusion(q_t, video_feature, order)
            _, logits = align_scores(fused, text_features, tau)
            states.append(QueryState(_gather(q_s, restore), _gather(q_t, restore), _gather(boxes, restore),
                                     torch.gather(scores, 1, restore), _gather(logits, restore), m))
        return states

"""Dynamically fused alignment: fuse video-level features into temporal queries and
score them against class text features by cosine softmax.

The classifier only ever sees temporal queries, the video feature and text features,
so localization (spatial queries) stays class-agnostic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, InputError

FUSION_MODES = ("dynamic", "fixed")
PROJECTION_INIT_STD = 1e-3


@dataclass
class ActionClass:
    name: str
    prompts: list = field(default_factory=list)
    is_novel: bool = False

    def __post_init__(self):
        if not self.prompts:
            raise InputError(f"class {self.name!r} has no prompts")


@dataclass
class Vocabulary:
    """Ordered action classes plus, once encoded, their C x D text features."""

    classes: list
    text_features: torch.Tensor | None = None

    def __post_init__(self):
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise InputError("duplicate class names in vocabulary")

    def __len__(self):
        return len(self.classes)

    @property
    def names(self):
        return [c.name for c in self.classes]

    @property
    def novel_mask(self):
        return [c.is_novel for c in self.classes]

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise InputError(f"class {name!r} not in vocabulary") from None

    def subset(self, names):
        idx = [self.index(n) for n in names]
        feats = None if self.text_features is None else self.text_features[idx]
        return Vocabulary([self.classes[i] for i in idx], feats)

    def permuted(self, order):
        return self.subset([self.names[i] for i in order])

    @classmethod
    def from_names(cls, names, template="a video of person {CLS}", novel=()):
        """Handcrafted single-prompt vocabulary."""
        return cls([ActionClass(n, [template.replace("{CLS}", n)], n in novel) for n in names])


def _unit_rows(x, eps=1e-12):
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def ensemble_text_features(per_prompt_features, eps=1e-8):
    """Mean-pool unit-norm prompt features per class, then re-normalize.

    ``per_prompt_features`` is a sequence (one entry per class) of K_c x D tensors.
    """
    rows = []
    for c, feats in enumerate(per_prompt_features):
        feats = torch.as_tensor(feats)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise InputError(f"class {c}: empty prompt feature list")
        mean = feats.mean(dim=0)
        norm = mean.norm()
        if norm < eps:
            raise InputError(f"class {c}: prompt features cancel out (degenerate ensemble)")
        rows.append(mean / norm)
    if not rows:
        raise InputError("no classes to ensemble")
    return torch.stack(rows)


def dynamic_fuse(queries, video_feature, lam, projection=None):
    """Convex fusion ``lam * f_v + (1 - lam) * unit(proj(Q))``, rows re-normalized.

    Projected queries enter at unit length (zero rows stay zero), so ``lam`` alone sets
    each source's share. queries: (..., N, D_q); video_feature: (..., D);
    lam: scalar, (N,) or (B, N) in [0, 1].
    """
    projected = _unit_rows(queries if projection is None else projection(queries))
    lam = torch.as_tensor(lam, dtype=projected.dtype, device=projected.device)
    if lam.ndim >= 1:
        lam = lam[..., None]
    video = video_feature.unsqueeze(-2).expand_as(projected)
    fused = lam * video + (1 - lam) * projected
    return _unit_rows(fused)


def align_scores(fused, text_features, tau):
    """Cosine alignment against C text features; returns (probabilities, logits)."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    logits = fused @ text_features.transpose(-1, -2) / tau
    return logits.softmax(dim=-1), logits


class DynamicFusion(nn.Module):
    """Per-stage fusion parameters: N pre-sigmoid weights and the D_q -> D projection."""

    def __init__(self, num_queries, query_dim, embed_dim, mode="dynamic", fixed_lambda=0.5):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}")
        if mode == "fixed" and not 0.0 <= fixed_lambda <= 1.0:
            raise ConfigError(f"fixed lambda must lie in [0, 1], got {fixed_lambda}")
        self.mode = mode
        self.fixed_lambda = float(fixed_lambda)
        # sigmoid(0) = 0.5
        self.lambda_raw = nn.Parameter(torch.zeros(num_queries))
        self.projection = nn.Linear(query_dim, embed_dim)
        # fusion normalizes projected rows; a small init lets their direction move quickly early on
        nn.init.normal_(self.projection.weight, std=PROJECTION_INIT_STD)
        nn.init.zeros_(self.projection.bias)

    @property
    def lam(self):
        return self.lambda_for()

    def lambda_for(self, order=None):
        """Effective weights; with ``order`` (B x N) row j holds query slot order[:, j].

        The gather happens before the sigmoid so every elementwise op sees the same layout.
        """
        raw = self.lambda_raw if order is None else self.lambda_raw[order]
        if self.mode == "fixed":
            return torch.full_like(raw, self.fixed_lambda)
        return torch.sigmoid(raw)

    def forward(self, temporal_queries, video_feature, order=None):
        return dynamic_fuse(temporal_queries, video_feature, self.lambda_for(order), self.projection)


def classify(temporal_queries, video_feature, text_features, fusion, tau):
    """Action logits for every query of one stage (N x C, or batched)."""
    fused = fusion(temporal_queries, video_feature)
    _, logits = align_scores(fused, text_features, tau)
    return logits

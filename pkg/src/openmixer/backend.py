"""Video-language encoder interface, the deterministic toy encoder, positional-embedding
interpolation and the residual multi-scale feature pyramid.
"""
from __future__ import annotations

import hashlib
import importlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dfa import Vocabulary, ensemble_text_features
from .errors import ConfigError, InputError

PYRAMID_STRIDES = (0.25, 0.5, 1.0, 2.0)

# toy descriptor channels: mean r, g, b, frame-difference magnitude, chroma, constant
TOY_CHANNELS = 6


@dataclass
class VideoClip:
    frames: np.ndarray  # T x H x W x 3, floats in [0, 1]
    frame_rate: float = 25.0
    keyframe_index: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InputError(f"frames must be T x H x W x 3, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise InputError("a clip needs at least one frame")
        if self.keyframe_index is None:
            self.keyframe_index = self.frames.shape[0] // 2
        if not 0 <= self.keyframe_index < self.frames.shape[0]:
            raise InputError(f"keyframe {self.keyframe_index} outside [0, {self.frames.shape[0]})")

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass
class VLMFeatureBundle:
    patch_features: torch.Tensor       # T x h x w x D
    patch_features_norm: torch.Tensor  # T x h x w x D, unit rows
    video_feature: torch.Tensor        # D, unit norm
    text_features: torch.Tensor        # C x D, unit rows
    temperature: float
    keyframe_index: int
    reversed_attention: bool = False

    @property
    def grid(self):
        return tuple(self.patch_features.shape[1:3])


@dataclass
class BackendConfig:
    kind: str = "toy"
    patch_size: int = 16
    dim: int = 32
    temperature: float = 0.01
    seed: int = 0
    reversed_attention: bool | None = None  # None: backend default
    prompt_noise: float = 0.0
    chroma_weight: float = 0.5
    bias: float = 0.05
    saliency_floor: float = 1e-3  # pooling weight every patch gets on top of its chroma
    # class name -> toy descriptor code; the text feature becomes the projected code
    text_codes: dict = field(default_factory=dict)
    target: str | None = None  # "module:attr" factory for external backends

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backend keys: {sorted(unknown)}")
        return cls(**d)


def _unit(x, dim=-1, eps=1e-12):
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


def temporal_mean_pool(frame_features):
    """Mean over frames, re-normalized to unit length."""
    frame_features = torch.as_tensor(frame_features)
    if frame_features.ndim != 2 or frame_features.shape[0] == 0:
        raise InputError("temporal_mean_pool needs a non-empty T x D array")
    mean = frame_features.mean(dim=0)
    norm = mean.norm()
    if norm <= 1e-12:
        raise InputError("frame features average to zero")
    return mean / norm


def interpolate_positional_embeddings(pe, target_len=None, target_grid=None):
    """Resample pre-trained positional embeddings to a new length or spatial grid.

    Temporal mode (``target_len``) interpolates linearly with endpoints pinned; spatial
    mode (``target_grid=(h, w)``) reshapes the source to its square grid and resamples
    bilinearly.
    """
    pe = torch.as_tensor(pe)
    if pe.ndim != 2 or pe.shape[0] < 1:
        raise InputError("positional embeddings must be a non-empty L x D array")
    src_len, dim = pe.shape
    if (target_len is None) == (target_grid is None):
        raise InputError("give exactly one of target_len / target_grid")
    if target_len is not None:
        if target_len == src_len:
            return pe.clone()
        if src_len == 1:
            return pe.expand(target_len, dim).clone()
        out = F.interpolate(pe.T[None], size=target_len, mode="linear", align_corners=True)
        return out[0].T.contiguous()
    side = math.isqrt(src_len)
    if side * side != src_len:
        raise InputError(f"{src_len} spatial embeddings do not form a square grid")
    th, tw = target_grid
    if (th, tw) == (side, side):
        return pe.clone()
    grid = pe.T.reshape(1, dim, side, side)
    out = F.interpolate(grid, size=(th, tw), mode="bilinear", align_corners=False)
    return out.reshape(dim, th * tw).T.contiguous()


class VideoLanguageBackend:
    """Interface every encoder implements; see ``encode_clip``."""

    reversed_attention = False

    def __init__(self, config: BackendConfig):
        self.config = config

    def encode_video(self, clip):
        """Return (V, V_norm, f_v) for one clip."""
        raise NotImplementedError

    def encode_text(self, vocabulary):
        """Return C x D unit-norm text features (prompt-ensembled)."""
        raise NotImplementedError

    def encode_clip(self, clip, vocabulary, text_features=None):
        if len(vocabulary) == 0:
            raise InputError("empty vocabulary")
        p = self.config.patch_size
        _, height, width, _ = clip.frames.shape
        if height % p or width % p:
            raise ConfigError(f"frame size {height}x{width} is not a multiple of patch size {p}")
        if text_features is None:
            text_features = vocabulary.text_features
        if text_features is None:
            text_features = self.encode_text(vocabulary)
        v, v_norm, f_v = self.encode_video(clip)
        return VLMFeatureBundle(
            patch_features=v,
            patch_features_norm=v_norm,
            video_feature=f_v,
            text_features=text_features,
            temperature=self.config.temperature,
            keyframe_index=clip.keyframe_index,
            reversed_attention=self.reversed_attention,
        )


def stable_seed(*parts):
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class ToyBackend(VideoLanguageBackend):
    """Deterministic stand-in for a frozen video VLM.

    A patch is summarized by a small descriptor (mean colour, mean absolute frame
    difference, chroma, constant) that a fixed seeded projection with orthonormal
    columns lifts to D dimensions. Inner products between descriptors are therefore
    preserved, which lets tests build scenes whose appearance aligns with chosen text
    features exactly.

    The video feature pools patches weighted by chroma, so colourful content outweighs
    a grey background the way a pretrained encoder's global feature follows the subject.
    """

    reversed_attention = False

    def __init__(self, config: BackendConfig):
        super().__init__(config)
        if config.dim < TOY_CHANNELS:
            raise ConfigError(f"toy backend needs dim >= {TOY_CHANNELS}")
        if not config.saliency_floor > 0:
            raise ConfigError("toy backend saliency_floor must be positive")
        rng = np.random.default_rng(config.seed)
        q, _ = np.linalg.qr(rng.standard_normal((config.dim, TOY_CHANNELS)))
        self.projection = torch.from_numpy(q.astype(np.float32))  # D x K

    def descriptors(self, frames):
        """Per-patch descriptors, T x h x w x K."""
        p = self.config.patch_size
        x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
        t, height, width, _ = x.shape
        prev = torch.cat([x[:1], x[:-1]], dim=0)
        motion = (x - prev).abs().mean(dim=-1, keepdim=True)
        chroma = x.amax(dim=-1, keepdim=True) - x.amin(dim=-1, keepdim=True)
        stats = torch.cat([x, motion, chroma * self.config.chroma_weight], dim=-1)
        h, w = height // p, width // p
        pooled = stats.reshape(t, h, p, w, p, 5).mean(dim=(2, 4))
        const = torch.full((t, h, w, 1), self.config.bias)
        return torch.cat([pooled, const], dim=-1)

    def code_to_feature(self, code):
        code = torch.as_tensor(code, dtype=torch.float32)
        if code.shape != (TOY_CHANNELS,):
            raise ConfigError(f"toy text code must have {TOY_CHANNELS} entries")
        return _unit(self.projection @ code)

    def encode_video(self, clip):
        desc = self.descriptors(clip.frames)
        v = desc @ self.projection.T
        v_norm = _unit(v)
        weights = desc[..., 4:5] + self.config.saliency_floor
        per_frame = _unit((v * weights).sum(dim=(1, 2)) / weights.sum(dim=(1, 2)))
        return v, v_norm, temporal_mean_pool(per_frame)

    def _prompt_feature(self, name, prompt):
        codes = self.config.text_codes
        if name in codes:
            base = self.code_to_feature(codes[name])
        else:
            rng = np.random.default_rng(stable_seed(self.config.seed, "class", name))
            base = _unit(torch.from_numpy(rng.standard_normal(self.config.dim).astype(np.float32)))
        if self.config.prompt_noise > 0:
            rng = np.random.default_rng(stable_seed(self.config.seed, "prompt", name, prompt))
            noise = torch.from_numpy(rng.standard_normal(self.config.dim).astype(np.float32))
            base = _unit(base + self.config.prompt_noise * _unit(noise))
        return base

    def encode_text(self, vocabulary):
        per_class = [
            torch.stack([self._prompt_feature(c.name, s) for s in c.prompts]) for c in vocabulary.classes
        ]
        return ensemble_text_features(per_class)


def make_backend(config: BackendConfig | dict):
    if isinstance(config, dict):
        config = BackendConfig.from_dict(config)
    if config.kind == "toy":
        backend = ToyBackend(config)
    elif config.kind == "external":
        if not config.target or ":" not in config.target:
            raise ConfigError("external backend needs target='module:factory'")
        module, attr = config.target.split(":", 1)
        factory = getattr(importlib.import_module(module), attr)
        backend = factory(config)
        if not isinstance(backend, VideoLanguageBackend):
            raise ConfigError(f"{config.target} did not return a VideoLanguageBackend")
        # external (CLIP-family) encoders default to reversed patch-text attention
        backend.reversed_attention = True
    else:
        raise ConfigError(f"unknown backend kind {config.kind!r}")
    if config.reversed_attention is not None:
        backend.reversed_attention = bool(config.reversed_attention)
    return backend


def encode_clip(clip, vocabulary, backend_config):
    return make_backend(backend_config).encode_clip(clip, vocabulary)


def _level_size(n, stride):
    # round half up; matches the stride-2 conv output ceil(n / 2)
    return int(math.floor(n / stride + 0.5))


@dataclass
class FeaturePyramid:
    levels: list  # [(stride, tensor B x D_p x T x h_l x w_l)]

    @property
    def strides(self):
        return [s for s, _ in self.levels]

    @property
    def maps(self):
        return [m for _, m in self.levels]


def _level_transform(stride, ch):
    if stride == 0.25:
        return nn.Sequential(nn.ConvTranspose2d(ch, ch, 2, 2), nn.GELU(), nn.ConvTranspose2d(ch, ch, 2, 2))
    if stride == 0.5:
        return nn.Sequential(nn.ConvTranspose2d(ch, ch, 2, 2))
    if stride == 1.0:
        return nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1))
    if stride == 2.0:
        return nn.Sequential(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
    raise ConfigError(f"unsupported pyramid stride {stride}")


class PyramidParams(nn.Module):
    """Learned parts of the pyramid: the D -> D_p projection and per-level (de)convolutions."""

    def __init__(self, in_dim, out_dim, strides=PYRAMID_STRIDES):
        super().__init__()
        self.strides = tuple(strides)
        self.proj = nn.Linear(in_dim, out_dim)
        self.transforms = nn.ModuleList(_level_transform(s, out_dim) for s in self.strides)
        for t in self.transforms:
            nn.init.zeros_(t[-1].weight)
            nn.init.zeros_(t[-1].bias)

    def zero_transforms(self):
        with torch.no_grad():
            for t in self.transforms:
                for p in t.parameters():
                    p.zero_()

    def forward(self, patch_features):
        return build_pyramid(patch_features, self)


def build_pyramid(patch_features, params: PyramidParams):
    """Residual pyramid: level l = conv_l(H) + interp(H, stride_l), with H = proj(V).

    ``patch_features`` is T x h x w x D or B x T x h x w x D.
    """
    v = patch_features
    if v.ndim == 4:
        v = v[None]
    b, t, h, w, _ = v.shape
    x = params.proj(v)  # B T h w Dp
    ch = x.shape[-1]
    x = x.permute(0, 1, 4, 2, 3).reshape(b * t, ch, h, w)
    levels = []
    for stride, transform in zip(params.strides, params.transforms):
        size = (_level_size(h, stride), _level_size(w, stride))
        learned = transform(x)
        if learned.shape[-2:] != size:
            raise InputError(f"level {stride}: got {tuple(learned.shape[-2:])}, expected {size}")
        resid = x if size == (h, w) else F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        level = (learned + resid).reshape(b, t, ch, *size).permute(0, 2, 1, 3, 4)
        levels.append((stride, level))
    return FeaturePyramid(levels)

"""Prior box locations from the patch-text attention of the frozen encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InputError

PRIOR_SOURCES = ("attention", "ground_truth", "random", "external")
SAMPLING_MODES = ("deterministic", "stochastic")


@dataclass
class AttentionMap:
    values: torch.Tensor  # T x h x w
    keyframe_index: int

    @property
    def keyframe(self):
        return self.values[self.keyframe_index]


@dataclass
class BoxSet:
    boxes: torch.Tensor          # N x 4, normalized (cx, cy, w, h)
    person_scores: torch.Tensor  # N
    stage: int = 0

    def __len__(self):
        return self.boxes.shape[0]


def prematch_text(video_feature, text_features):
    """Pick the class text feature most similar to the video feature (first index on ties)."""
    if text_features.shape[0] == 0:
        raise InputError("no text features to match against")
    sims = text_features @ video_feature
    idx = int(torch.argmax(sims))
    return idx, text_features[idx]


def patch_text_correlation(patch_features_norm, text_feature):
    return patch_features_norm @ text_feature


def reverse_attention(similarity):
    return 1 - similarity


def attention_map(bundle):
    """Keyframe-indexed attention for one clip; reversed when the backend asks for it."""
    _, f_t = prematch_text(bundle.video_feature, bundle.text_features)
    s = patch_text_correlation(bundle.patch_features_norm, f_t)
    if bundle.reversed_attention:
        s = reverse_attention(s)
    return AttentionMap(s, bundle.keyframe_index)


def _cell_centers(flat_idx, h, w):
    rows, cols = np.divmod(np.asarray(flat_idx), w)
    return np.stack([(cols + 0.5) / w, (rows + 0.5) / h], axis=-1)


def sample_prior_locations(attn, num, mode="deterministic", temperature=1.0, seed=0):
    """Return ``num`` distinct keyframe cell centres as normalized (cx, cy), shape num x 2.

    Deterministic mode takes the top cells (row-major order breaks ties); stochastic mode
    draws without replacement from a softmax over the keyframe slice.
    """
    if mode not in SAMPLING_MODES:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    key = attn.keyframe.detach().cpu().double().numpy()
    h, w = key.shape
    if num > h * w:
        raise InputError(f"cannot pick {num} distinct cells from a {h}x{w} map")
    flat = key.reshape(-1)
    if mode == "deterministic":
        order = np.argsort(-flat, kind="stable")[:num]
    else:
        logits = flat / temperature
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        order = np.random.default_rng(seed).choice(h * w, size=num, replace=False, p=probs)
    return _cell_centers(order, h, w)


def _cycle(rows, num):
    reps = -(-num // len(rows))
    return np.concatenate([rows] * reps, axis=0)[:num]


def init_box_queries(centers=None, prior_source="attention", num=None, gt_boxes=None,
                     external_boxes=None, seed=0, dtype=torch.float32):
    """Initial full-extent boxes around prior centres.

    Box sizes always start at the whole frame (w = h = 1); the source only decides the
    centres. ``gt_boxes`` / ``external_boxes`` are normalized cxcywh rows; external rows may
    carry a fifth score column used to keep the most confident ones.
    """
    if prior_source not in PRIOR_SOURCES:
        raise ConfigError(f"unknown prior source {prior_source!r}")
    if num is None:
        if centers is None:
            raise InputError("need either centers or num")
        num = len(centers)
    if prior_source == "attention":
        if centers is None:
            raise InputError("attention priors need sampled centers")
        xy = np.asarray(centers, dtype=np.float64)[:num]
    elif prior_source == "ground_truth":
        gt = np.asarray(gt_boxes if gt_boxes is not None else [], dtype=np.float64).reshape(-1, 4)
        if len(gt) == 0:
            raise InputError("ground-truth priors need at least one annotated box")
        xy = _cycle(gt[:, :2], num)
    elif prior_source == "random":
        xy = np.random.default_rng(seed).uniform(0.0, 1.0, size=(num, 2))
    else:
        if external_boxes is None:
            raise InputError("external priors need a box file")
        ext = np.asarray(external_boxes, dtype=np.float64)
        if ext.ndim != 2 or len(ext) == 0:
            raise InputError("external box list is empty")
        if ext.shape[1] >= 5:
            ext = ext[np.argsort(-ext[:, 4], kind="stable")]
        xy = _cycle(ext[:, :2], num)
    xy = np.clip(xy, 0.0, 1.0)
    boxes = np.concatenate([xy, np.ones((num, 2))], axis=1)
    return BoxSet(torch.as_tensor(boxes, dtype=dtype), torch.full((num,), 0.5, dtype=dtype), stage=0)

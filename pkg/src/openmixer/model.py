"""The full detector: frozen encoder features -> pyramid -> prior boxes -> cascade head,
plus keyframe-wise inference over whole videos.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torchvision.ops import batched_nms

from .backend import PyramidParams, build_pyramid, make_backend, stable_seed
from .box_ops import cxcywh_to_xyxy
from .config import ModelConfig
from .data import sample_frames
from .errors import InputError
from .evaluation import EvalProtocol, FrameDetection, link_tubes, video_map
from .head import CascadeHead, HeadConfig
from .prior import attention_map, init_box_queries, prematch_text, sample_prior_locations


@dataclass
class ClipBatch:
    patch_features: torch.Tensor  # B x T x h x w x D
    video_feature: torch.Tensor   # B x D
    text_features: torch.Tensor   # C x D
    matched_text: torch.Tensor    # B x D, pre-matched class feature per clip
    init_boxes: torch.Tensor      # B x N x 4
    keyframe_index: int
    temperature: float

    def __len__(self):
        return self.patch_features.shape[0]


def make_batch(bundles, box_sets):
    if not bundles:
        raise InputError("empty batch")
    keys = {b.keyframe_index for b in bundles}
    if len(keys) != 1:
        raise InputError("clips in a batch must share the keyframe index")
    text = bundles[0].text_features
    return ClipBatch(
        patch_features=torch.stack([b.patch_features for b in bundles]),
        video_feature=torch.stack([b.video_feature for b in bundles]),
        text_features=text,
        matched_text=torch.stack([prematch_text(b.video_feature, b.text_features)[1] for b in bundles]),
        init_boxes=torch.stack([s.boxes for s in box_sets]),
        keyframe_index=keys.pop(),
        temperature=bundles[0].temperature,
    )


def prior_boxes(bundle, num, model_cfg: ModelConfig, gt_boxes=None, external_boxes=None, seed=0):
    """Initial BoxSet for one clip under the configured prior source."""
    if model_cfg.prior_source == "attention":
        centers = sample_prior_locations(attention_map(bundle), num, model_cfg.sampling_mode,
                                         model_cfg.sampling_temperature, seed)
        return init_box_queries(centers, "attention")
    return init_box_queries(prior_source=model_cfg.prior_source, num=num, gt_boxes=gt_boxes,
                            external_boxes=external_boxes, seed=seed)


class Detector(nn.Module):
    """Learned parts of the detector; the encoder stays frozen and outside the module."""

    def __init__(self, head_cfg: HeadConfig, embed_dim):
        super().__init__()
        self.head_cfg = head_cfg
        self.pyramid = PyramidParams(embed_dim, head_cfg.pyramid_dim)
        self.head = CascadeHead(head_cfg, embed_dim)

    def forward(self, batch: ClipBatch):
        pyramid = build_pyramid(batch.patch_features, self.pyramid)
        return self.head(pyramid, batch.init_boxes, batch.keyframe_index, batch.video_feature,
                         batch.text_features, batch.temperature, matched_text=batch.matched_text)

    def fusions(self):
        return [stage.fusion for stage in self.head.stages]


def build_detector(config, seed=None):
    torch.manual_seed(config.seed if seed is None else seed)
    return Detector(config.head, config.backend.dim)


def postprocess(state, index, class_names, width, height, person_threshold=0.6, nms_iou=0.5):
    """Per-frame detections from one clip's final stage.

    Keeps queries whose person score exceeds the threshold; the label is the most likely
    class and the detection score is person score times that class probability.
    Returns (labels, scores, pixel boxes x1 y1 x2 y2).
    """
    with torch.no_grad():
        person = state.person_scores[index]
        keep = person > person_threshold
        if not bool(keep.any()):
            return [], np.zeros(0), np.zeros((0, 4))
        probs = state.action_probs[index][keep]
        cls_prob, cls = probs.max(dim=-1)
        scores = person[keep] * cls_prob
        corners = cxcywh_to_xyxy(state.boxes[index][keep]).clamp(0.0, 1.0)
        corners = corners * torch.tensor([width, height, width, height], dtype=corners.dtype)
        valid = (corners[:, 2] > corners[:, 0]) & (corners[:, 3] > corners[:, 1])
        corners, scores, cls = corners[valid], scores[valid], cls[valid]
        if nms_iou is not None and len(scores):
            kept = batched_nms(corners.double(), scores.double(), cls, nms_iou)
            corners, scores, cls = corners[kept], scores[kept], cls[kept]
        return [class_names[i] for i in cls.tolist()], scores.double().numpy(), corners.double().numpy()


class Inference:
    """Keyframe-wise detection over whole videos with a frozen encoder and trained detector."""

    def __init__(self, detector, config, vocabulary, backend=None):
        self.detector = detector
        self.config = config
        self.vocabulary = vocabulary
        self.backend = backend or make_backend(config.backend)
        if vocabulary.text_features is None:
            vocabulary.text_features = self.backend.encode_text(vocabulary)

    def frame_prior(self, bundle, video_id, frame, record=None, external=None):
        cfg = self.config
        gt = None
        if cfg.model.prior_source == "ground_truth":
            if record is None:
                raise InputError("ground-truth priors need the annotation record")
            gt = record.keyframe_target(frame, [t.label for t in record.tubes]).boxes.numpy()
            if len(gt) == 0:
                gt = np.array([[0.5, 0.5, 1.0, 1.0]])
        ext = None
        if cfg.model.prior_source == "external":
            ext = external.get((video_id, frame)) if external else None
            if ext is None or len(ext) == 0:
                ext = np.array([[0.5, 0.5, 1.0, 1.0, 0.0]])
        seed = stable_seed(cfg.seed, "eval-prior", video_id, frame)
        return prior_boxes(bundle, cfg.head.num_queries, cfg.model, gt, ext, seed)

    def detect_video(self, frames, video_id, record=None, external=None, batch_size=16, frames_to_run=None):
        cfg = self.config
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[0] == 0:
            raise InputError(f"video {video_id} has no frames")
        height, width = frames.shape[1:3]
        names = self.vocabulary.names
        out = []
        todo = list(range(frames.shape[0])) if frames_to_run is None else list(frames_to_run)
        self.detector.eval()
        for start in range(0, len(todo), batch_size):
            chunk = todo[start:start + batch_size]
            bundles, priors = [], []
            for k in chunk:
                clip = sample_frames(frames, k, cfg.data.clip_len, cfg.data.frame_stride)
                bundle = self.backend.encode_clip(clip, self.vocabulary, self.vocabulary.text_features)
                bundles.append(bundle)
                priors.append(self.frame_prior(bundle, video_id, k, record, external))
            with torch.no_grad():
                state = self.detector(make_batch(bundles, priors))[-1]
            for i, k in enumerate(chunk):
                labels, scores, boxes = postprocess(state, i, names, width, height,
                                                    cfg.eval.person_threshold, cfg.model.nms_iou)
                out.extend(FrameDetection(video_id, k, lab, float(s), tuple(map(float, b)))
                           for lab, s, b in zip(labels, scores, boxes))
        return out


def external_priors_by_frame(detections, records):
    """Group detection-file rows into normalized (cx, cy, w, h, score) priors per frame."""
    sizes = {r.video_id: (r.width, r.height) for r in records}
    grouped = {}
    for d in detections:
        if d.video_id not in sizes:
            continue
        w, h = sizes[d.video_id]
        x1, y1, x2, y2 = d.box
        grouped.setdefault((d.video_id, d.frame_index), []).append(
            [(x1 + x2) / 2 / w, (y1 + y2) / 2 / h, (x2 - x1) / w, (y2 - y1) / h, d.score])
    return {k: _box_array_with_score(v) for k, v in grouped.items()}


def _box_array_with_score(rows):
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


def evaluate_detector(detector, config, records, videos, vocabulary, protocol: EvalProtocol | None = None,
                      external=None):
    """Detect on every frame of ``records`` and score tubes; returns (report, detections).

    ``vocabulary`` is the full base + novel vocabulary; the protocol picks the classes
    offered to the classifier and scored.
    """
    protocol = protocol or EvalProtocol(config.eval.protocol, config.eval.iou_threshold,
                                        config.eval.person_threshold, config.eval.temporal_only)
    base = [c.name for c in vocabulary.classes if not c.is_novel]
    novel = [c.name for c in vocabulary.classes if c.is_novel]
    classes = protocol.evaluated_classes(base, novel)
    if not classes:
        raise InputError(f"protocol {protocol.mode} has no classes to evaluate")
    runner = Inference(detector, config, vocabulary.subset(classes))
    detections = []
    for r in records:
        if r.video_id not in videos:
            raise InputError(f"no frames for video {r.video_id}")
        detections.extend(runner.detect_video(videos[r.video_id], r.video_id, r, external))
    tubes = link_tubes(detections, config.eval.continuity_iou)
    gt = [t for r in records for t in r.gt_tubes() if t.label in classes]
    return video_map(tubes, gt, protocol, base, novel), detections

"""Spatio-temporal evaluation: tube linking, 3-D tube IoU, video / frame mAP.

Boxes here are corner-form (x1, y1, x2, y2) in any consistent unit; IoU is unit-free.
Classes are referred to by name.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

PROTOCOL_MODES = ("base_only", "novel_only", "generalized")


@dataclass
class FrameDetection:
    video_id: str
    frame_index: int
    label: str
    score: float
    box: tuple  # x1, y1, x2, y2


@dataclass
class DetectionTube:
    video_id: str
    label: str
    frames: list  # [(frame_index, box, score)], strictly increasing and contiguous

    def __post_init__(self):
        idx = [f for f, _, _ in self.frames]
        if any(b != a + 1 for a, b in zip(idx, idx[1:])):
            raise InputError(f"tube frames must be contiguous and increasing: {idx}")

    @property
    def tube_score(self):
        if not self.frames:
            return 0.0
        return float(np.mean([s for _, _, s in self.frames]))

    @property
    def frame_boxes(self):
        return {f: b for f, b, _ in self.frames}

    @classmethod
    def from_boxes(cls, video_id, label, start, boxes, score=1.0):
        return cls(video_id, label, [(start + i, tuple(b), score) for i, b in enumerate(boxes)])


@dataclass
class EvalProtocol:
    mode: str = "base_only"
    iou_threshold: float = 0.5
    person_threshold: float = 0.6
    temporal_only: bool = False

    def __post_init__(self):
        if self.mode not in PROTOCOL_MODES:
            raise ConfigError(f"unknown protocol mode {self.mode!r}")
        for name in ("iou_threshold", "person_threshold"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")

    def evaluated_classes(self, base, novel):
        if self.mode == "base_only":
            return list(base)
        if self.mode == "novel_only":
            return list(novel)
        return list(base) + list(novel)


@dataclass
class EvalReport:
    per_class: dict = field(default_factory=dict)  # name -> AP or None (vacuous)
    mean: float | None = None
    base: float | None = None
    novel: float | None = None
    metric: str = "video_map"

    def to_dict(self):
        return {"metric": self.metric, "mean": self.mean, "base": self.base, "novel": self.novel,
                "per_class": self.per_class}

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def format_table(self):
        def pct(v):
            return "   -  " if v is None else f"{100 * v:6.2f}"

        lines = [f"{self.metric}", f"{'class':<28}{'AP':>8}"]
        for name, ap in self.per_class.items():
            lines.append(f"{name:<28}{pct(ap):>8}")
        lines.append(f"{'Mean':<28}{pct(self.mean):>8}")
        lines.append(f"{'Base':<28}{pct(self.base):>8}")
        lines.append(f"{'Novel':<28}{pct(self.novel):>8}")
        return "\n".join(lines)


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def tube_3d_iou(a, b, temporal_only=False):
    """Temporal IoU of the frame sets times the mean spatial IoU on shared frames."""
    fa, fb = a.frame_boxes, b.frame_boxes
    shared = sorted(set(fa) & set(fb))
    if not shared:
        return 0.0
    t_iou = len(shared) / len(set(fa) | set(fb))
    if temporal_only:
        return t_iou
    return t_iou * float(np.mean([box_iou(fa[f], fb[f]) for f in shared]))


def link_tubes(detections, continuity_iou=0.1):
    """Greedy online linking of per-frame detections into tubes, per video and class.

    At each frame, live tubes (best mean score first) claim the unassigned detection
    maximizing ``score + IoU(tail, detection)`` among those overlapping the tail by at
    least ``continuity_iou``. Tubes that find nothing end; leftovers start new tubes.
    """
    groups = defaultdict(list)
    for d in detections:
        groups[(d.video_id, d.label)].append(d)
    tubes = []
    for (video_id, label) in sorted(groups):
        by_frame = defaultdict(list)
        for d in groups[(video_id, label)]:
            by_frame[d.frame_index].append(d)
        active = []
        finished = []
        prev_frame = None
        for f in sorted(by_frame):
            dets = sorted(by_frame[f], key=lambda d: (-d.score, tuple(d.box)))
            if prev_frame is None or f != prev_frame + 1:
                finished.extend(active)
                active = []
            taken = [False] * len(dets)
            still = []
            for tube in sorted(active, key=lambda t: -np.mean([s for _, _, s in t])):
                tail = tube[-1][1]
                best, best_val = None, -np.inf
                for j, d in enumerate(dets):
                    if taken[j]:
                        continue
                    iou = box_iou(tail, d.box)
                    if iou >= continuity_iou and d.score + iou > best_val:
                        best, best_val = j, d.score + iou
                if best is None:
                    finished.append(tube)
                else:
                    taken[best] = True
                    tube.append((f, tuple(dets[best].box), dets[best].score))
                    still.append(tube)
            for j, d in enumerate(dets):
                if not taken[j]:
                    still.append([(f, tuple(d.box), d.score)])
            active = still
            prev_frame = f
        finished.extend(active)
        tubes.extend(DetectionTube(video_id, label, t) for t in finished)
    return tubes


def average_precision(ranked, num_gt):
    """All-point interpolated AP. ``ranked`` is [(score, is_tp)]; None when vacuous."""
    ranked = sorted(ranked, key=lambda r: -r[0])
    if num_gt == 0:
        return 0.0 if ranked else None
    if not ranked:
        return 0.0
    tp = np.cumsum([1.0 if hit else 0.0 for _, hit in ranked])
    fp = np.cumsum([0.0 if hit else 1.0 for _, hit in ranked])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _aggregate(per_class, base, novel):
    def mean(names):
        vals = [per_class[n] for n in names if per_class.get(n) is not None]
        return float(np.mean(vals)) if vals else None

    return mean(list(per_class)), mean([n for n in base if n in per_class]), \
        mean([n for n in novel if n in per_class])


def _check_labels(labels, classes):
    unknown = sorted(set(labels) - set(classes))
    if unknown:
        raise InputError(f"detections for classes outside the evaluated vocabulary: {unknown}")


def _tube_sort_key(t):
    return (-t.tube_score, t.video_id, t.frames[0][0] if t.frames else -1,
            tuple(tuple(b) for _, b, _ in t.frames))


def video_map(detected_tubes, gt_tubes, protocol: EvalProtocol, base_classes, novel_classes=()):
    """Per-class video AP at the protocol's 3-D IoU threshold, plus Mean / Base / Novel."""
    classes = protocol.evaluated_classes(base_classes, novel_classes)
    dets = [t for t in detected_tubes if t.frames and t.tube_score > 0]
    _check_labels([t.label for t in dets], classes)
    per_class = {}
    for c in classes:
        gts = defaultdict(list)
        num_gt = 0
        for g in gt_tubes:
            if g.label == c:
                gts[g.video_id].append(g)
                num_gt += 1
        ranked = []
        for det in sorted((t for t in dets if t.label == c), key=_tube_sort_key):
            pool = gts[det.video_id]
            hit = False
            if pool:
                ious = [tube_3d_iou(det, g, protocol.temporal_only) for g in pool]
                best = int(np.argmax(ious))
                if ious[best] >= protocol.iou_threshold:
                    hit = True
                    pool.pop(best)
            ranked.append((det.tube_score, hit))
        per_class[c] = average_precision(ranked, num_gt)
    mean, base, novel = _aggregate(per_class, base_classes, novel_classes)
    return EvalReport(per_class, mean, base, novel, "video_map")


def frame_map(detections, gt_boxes, protocol: EvalProtocol, base_classes, novel_classes=(),
              iou_threshold=0.5):
    """Per-class frame AP. ``gt_boxes`` is [(video_id, frame_index, label, box)]."""
    classes = protocol.evaluated_classes(base_classes, novel_classes)
    dets = [d for d in detections if d.score > 0]
    _check_labels([d.label for d in dets], classes)
    per_class = {}
    for c in classes:
        pool = defaultdict(list)
        num_gt = 0
        for vid, f, label, box in gt_boxes:
            if label == c:
                pool[(vid, f)].append(box)
                num_gt += 1
        ranked = []
        for d in sorted((d for d in dets if d.label == c),
                        key=lambda d: (-d.score, d.video_id, d.frame_index, tuple(d.box))):
            cands = pool[(d.video_id, d.frame_index)]
            hit = False
            if cands:
                ious = [box_iou(d.box, g) for g in cands]
                best = int(np.argmax(ious))
                if ious[best] >= iou_threshold:
                    hit = True
                    cands.pop(best)
            ranked.append((d.score, hit))
        per_class[c] = average_precision(ranked, num_gt)
    mean, base, novel = _aggregate(per_class, base_classes, novel_classes)
    return EvalReport(per_class, mean, base, novel, "frame_map")


def merge_reports(reports, base_classes, novel_classes):
    """Combine individually-tested reports (e.g. base-only and novel-only) into one."""
    per_class = {}
    for r in reports:
        per_class.update(r.per_class)
    mean, base, novel = _aggregate(per_class, base_classes, novel_classes)
    return EvalReport(per_class, mean, base, novel, reports[0].metric if reports else "video_map")


def score_detection_file(path, gt_tubes, protocol: EvalProtocol, base_classes, novel_classes=(),
                         continuity_iou=0.1):
    """Score an externally produced per-frame detection file with the video-mAP pipeline."""
    from .data import load_detections

    detections = load_detections(path)
    return video_map(link_tubes(detections, continuity_iou), gt_tubes, protocol, base_classes,
                     novel_classes)

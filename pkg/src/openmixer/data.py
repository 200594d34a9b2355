"""Annotation, split, prompt and detection files; frame sampling; the synthetic dataset.

File formats (all versioned except prompt files, which keep the plain JSON layout
``{"class": "sentence"}`` or ``{"class": ["sentence", ...]}``):

* annotations: JSON lines, first line ``{"schema": "openmixer/annotations", "version": 1}``,
  then one record per video with pixel boxes ``[frame, x1, y1, x2, y2]`` per tube.
* splits: JSON object with ``schema``, ``version``, ``base`` and ``novel`` class lists.
* detections: CSV with a ``# openmixer/detections v1`` header line followed by the column
  row ``video_id,frame_index,class,score,x1,y1,x2,y2`` (pixel boxes).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backend import TOY_CHANNELS, VideoClip
from .criterion import Target
from .dfa import ActionClass, Vocabulary
from .errors import InputError, ValidationError
from .evaluation import DetectionTube, FrameDetection

ANNOTATION_SCHEMA = "openmixer/annotations"
SPLIT_SCHEMA = "openmixer/split"
DETECTION_HEADER = "# openmixer/detections v1"
DETECTION_COLUMNS = ["video_id", "frame_index", "class", "score", "x1", "y1", "x2", "y2"]
SCHEMA_VERSION = 1


@dataclass
class AnnotatedTube:
    label: str
    boxes: dict  # frame_index -> (x1, y1, x2, y2) pixels


@dataclass
class AnnotationRecord:
    video_id: str
    frame_count: int
    width: int
    height: int
    tubes: list = field(default_factory=list)
    split_tag: str = "train"

    @property
    def labels(self):
        return sorted({t.label for t in self.tubes})

    def validate(self):
        problems = []
        for t in self.tubes:
            for f, (x1, y1, x2, y2) in t.boxes.items():
                if not 0 <= f < self.frame_count:
                    problems.append(f"{self.video_id}: frame {f} outside [0, {self.frame_count})")
                if not (0 <= x1 < x2 <= self.width and 0 <= y1 < y2 <= self.height):
                    problems.append(f"{self.video_id}: box {(x1, y1, x2, y2)} at frame {f} out of bounds")
        if problems:
            raise ValidationError(f"invalid annotation record {self.video_id}", problems)

    def annotated_frames(self):
        return sorted({f for t in self.tubes for f in t.boxes})

    def keyframe_target(self, frame_index, class_names):
        """Normalized cxcywh boxes and vocabulary indices of the actors on one frame."""
        boxes, labels = [], []
        for t in self.tubes:
            if frame_index in t.boxes:
                x1, y1, x2, y2 = t.boxes[frame_index]
                boxes.append([(x1 + x2) / 2 / self.width, (y1 + y2) / 2 / self.height,
                              (x2 - x1) / self.width, (y2 - y1) / self.height])
                labels.append(class_names.index(t.label))
        return Target(torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
                      torch.tensor(labels, dtype=torch.long))

    def gt_tubes(self):
        out = []
        for t in self.tubes:
            frames = sorted(t.boxes)
            out.append(DetectionTube(self.video_id, t.label, [(f, tuple(t.boxes[f]), 1.0) for f in frames]))
        return out

    def gt_frame_boxes(self):
        return [(self.video_id, f, t.label, tuple(b)) for t in self.tubes for f, b in sorted(t.boxes.items())]


def _record_to_json(r):
    return {
        "video_id": r.video_id, "frame_count": r.frame_count, "width": r.width, "height": r.height,
        "split": r.split_tag,
        "tubes": [{"label": t.label, "frames": [[f, *map(float, b)] for f, b in sorted(t.boxes.items())]}
                  for t in r.tubes],
    }


def _record_from_json(d):
    tubes = [AnnotatedTube(t["label"], {int(row[0]): tuple(float(v) for v in row[1:5]) for row in t["frames"]})
             for t in d["tubes"]]
    return AnnotationRecord(d["video_id"], int(d["frame_count"]), int(d["width"]), int(d["height"]),
                            tubes, d.get("split", "train"))


def _check_header(obj, schema, path):
    if not isinstance(obj, dict) or obj.get("schema") != schema:
        raise InputError(f"{path}: missing {schema} schema header")
    if obj.get("version") != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported schema version {obj.get('version')}")


def save_annotations(records, path):
    with open(path, "w") as f:
        f.write(json.dumps({"schema": ANNOTATION_SCHEMA, "version": SCHEMA_VERSION}) + "\n")
        for r in records:
            f.write(json.dumps(_record_to_json(r)) + "\n")


def load_annotations(path):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise InputError(f"{path}: empty annotation file")
    _check_header(json.loads(lines[0]), ANNOTATION_SCHEMA, path)
    records = []
    for n, line in enumerate(lines[1:], start=2):
        try:
            rec = _record_from_json(json.loads(line))
        except (KeyError, ValueError, TypeError, IndexError) as e:
            raise InputError(f"{path}:{n}: malformed record ({e})") from e
        rec.validate()
        records.append(rec)
    return records


@dataclass
class SplitSpec:
    dataset: str
    ratio: float
    seed: int
    base: list
    novel: list

    def __post_init__(self):
        overlap = set(self.base) & set(self.novel)
        if overlap:
            raise ValidationError("base and novel classes overlap", sorted(overlap))

    @property
    def classes(self):
        return list(self.base) + list(self.novel)


def parse_ratio(ratio):
    """Accept 0.5, "0.5", "50/50", "75/25"; return the base fraction."""
    if isinstance(ratio, str) and "/" in ratio:
        a, b = (float(x) for x in ratio.split("/"))
        if a <= 0 or b <= 0:
            raise InputError(f"invalid ratio {ratio!r}")
        ratio = a / (a + b)
    ratio = float(ratio)
    if not 0 < ratio < 1:
        raise InputError(f"base ratio must lie strictly between 0 and 1, got {ratio}")
    return ratio


def make_split(classes, ratio=0.5, seed=0, dataset="custom"):
    """Seeded shuffle, then the first floor(ratio * C) classes become base classes."""
    classes = list(classes)
    if len(classes) < 2:
        raise InputError("need at least two classes to split")
    if len(set(classes)) != len(classes):
        raise InputError("duplicate class names")
    frac = parse_ratio(ratio)
    n_base = min(max(int(math.floor(frac * len(classes) + 1e-9)), 1), len(classes) - 1)
    order = np.random.default_rng(seed).permutation(len(classes))
    shuffled = [classes[i] for i in order]
    return SplitSpec(dataset, frac, int(seed), shuffled[:n_base], shuffled[n_base:])


def save_split(split, path):
    with open(path, "w") as f:
        json.dump({"schema": SPLIT_SCHEMA, "version": SCHEMA_VERSION, **asdict(split)}, f, indent=2)


def load_split(path):
    with open(path) as f:
        d = json.load(f)
    _check_header(d, SPLIT_SCHEMA, path)
    return SplitSpec(d["dataset"], float(d["ratio"]), int(d["seed"]), list(d["base"]), list(d["novel"]))


def sample_frames(video_frames, keyframe, num_frames=16, stride=1, frame_rate=25.0):
    """Window of ``num_frames`` frames at ``stride`` centred on ``keyframe``; edges replicate."""
    frames = np.asarray(video_frames)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise InputError("video has no decodable frames")
    total = frames.shape[0]
    if not 0 <= keyframe < total:
        raise InputError(f"keyframe {keyframe} outside video of {total} frames")
    half = num_frames // 2
    idx = np.clip(keyframe + (np.arange(num_frames) - half) * stride, 0, total - 1)
    return VideoClip(frames[idx], frame_rate=frame_rate, keyframe_index=half)


def _reject_duplicates(pairs):
    seen = set()
    dups = []
    for k, _ in pairs:
        if k in seen:
            dups.append(k)
        seen.add(k)
    if dups:
        raise ValidationError("duplicate class keys in prompt file", dups)
    return dict(pairs)


def load_prompts(path, known_classes=None):
    """Read a prompt file; returns {class: [sentences]} in file order."""
    with open(path) as f:
        raw = json.load(f, object_pairs_hook=_reject_duplicates)
    if not isinstance(raw, dict):
        raise InputError(f"{path}: prompt file must be a JSON object")
    prompts = {}
    bad = []
    for name, value in raw.items():
        sentences = [value] if isinstance(value, str) else value
        if not isinstance(sentences, list) or not sentences or not all(isinstance(s, str) for s in sentences):
            bad.append(name)
            continue
        prompts[name] = list(sentences)
    if bad:
        raise ValidationError(f"{path}: classes without usable prompts", bad)
    if known_classes is not None:
        unknown = sorted(set(prompts) - set(known_classes))
        if unknown:
            raise ValidationError(f"{path}: prompts for classes not in the annotations", unknown)
    return prompts


def save_prompts(prompts, path):
    with open(path, "w") as f:
        json.dump({k: (v[0] if len(v) == 1 else v) for k, v in prompts.items()}, f, indent=2)


def build_vocabulary(class_names, prompts=None, template="a video of person {CLS}", novel=()):
    """Vocabulary over ``class_names``; classes missing from ``prompts`` use the template."""
    prompts = prompts or {}
    novel = set(novel)
    return Vocabulary([ActionClass(n, list(prompts.get(n) or [template.replace("{CLS}", n)]), n in novel)
                       for n in class_names])


def save_detections(detections, path):
    with open(path, "w", newline="") as f:
        f.write(DETECTION_HEADER + "\n")
        w = csv.writer(f)
        w.writerow(DETECTION_COLUMNS)
        for d in detections:
            w.writerow([d.video_id, d.frame_index, d.label, repr(float(d.score)), *(repr(float(v)) for v in d.box)])


def load_detections(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"detection file not found: {path}")
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != DETECTION_HEADER:
        raise InputError(f"{path}:1: expected header {DETECTION_HEADER!r}")
    if len(lines) < 2 or [c.strip() for c in lines[1].split(",")] != DETECTION_COLUMNS:
        raise InputError(f"{path}:2: expected columns {','.join(DETECTION_COLUMNS)}")
    out = []
    for n, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != len(DETECTION_COLUMNS):
            raise InputError(f"{path}:{n}: expected {len(DETECTION_COLUMNS)} fields, got {len(row)}")
        try:
            vid, frame, label = row[0], int(row[1]), row[2]
            score = float(row[3])
            box = tuple(float(v) for v in row[4:8])
        except ValueError as e:
            raise InputError(f"{path}:{n}: {e}") from e
        if not (box[2] > box[0] and box[3] > box[1]):
            raise InputError(f"{path}:{n}: degenerate box {box}")
        if not 0 <= score <= 1:
            raise InputError(f"{path}:{n}: score {score} outside [0, 1]")
        out.append(FrameDetection(vid, frame, label, score, box))
    return out


# --- synthetic desk-scale dataset -------------------------------------------------

MOTIONS = ("slide", "bounce", "orbit", "still")
MOTION_MARGIN = 20  # largest bounce swing, so every trajectory fits in size - actor


@dataclass
class SyntheticClass:
    name: str
    color: tuple
    motion: str
    is_novel: bool = False

    @property
    def text_code(self):
        # colour axes only: the toy encoder maps this class's actor patches close to it
        return [float(c) for c in self.color] + [0.0] * (TOY_CHANNELS - 3)


DEFAULT_CLASSES = (
    SyntheticClass("slide_red", (1.0, 0.0, 0.0), "slide"),
    SyntheticClass("bounce_green", (0.0, 1.0, 0.0), "bounce"),
    SyntheticClass("orbit_blue", (0.0, 0.0, 1.0), "orbit", is_novel=True),
)


@dataclass
class SyntheticConfig:
    size: int = 64
    frames_per_video: int = 16
    train_videos: int = 20
    test_videos: int = 10
    test_classes: str = "novel"  # "novel" or "all"
    min_actor: int = 14
    max_actor: int = 26
    background_max: float = 0.2
    tint_max: float = 0.5  # off-axis colour channels drawn from [0, tint_max] per video
    body_level: float = 0.6  # every actor is a grey body of this brightness around its class-coloured core
    core_fraction: float = 0.7  # core side length relative to the actor box
    classes: tuple = DEFAULT_CLASSES


@dataclass
class SyntheticDataset:
    records: list
    videos: dict  # video_id -> F x H x W x 3 float32
    classes: list

    @property
    def class_names(self):
        return [c.name for c in self.classes]

    @property
    def base_classes(self):
        return [c.name for c in self.classes if not c.is_novel]

    @property
    def novel_classes(self):
        return [c.name for c in self.classes if c.is_novel]

    @property
    def text_codes(self):
        return {c.name: c.text_code for c in self.classes}

    @property
    def prompts(self):
        return {c.name: [f"a {c.motion} movement of a coloured box"] for c in self.classes}

    def split(self):
        return SplitSpec("synthetic", len(self.base_classes) / len(self.classes), 0,
                         self.base_classes, self.novel_classes)

    def records_for(self, tag):
        return [r for r in self.records if r.split_tag == tag]


def _trajectory(motion, rng, n, size, w, h):
    span_x, span_y = size - w, size - h
    t = np.arange(n, dtype=np.float64)
    if motion == "slide":
        x0 = rng.uniform(0, span_x)
        v = rng.uniform(1.0, 2.0) * rng.choice([-1.0, 1.0])
        xs = x0 + v * t
        # reflect at the frame borders
        period = 2 * span_x
        xs = np.abs((xs % period + period) % period)
        xs = np.where(xs > span_x, period - xs, xs)
        ys = np.full(n, rng.uniform(0, span_y))
    elif motion == "bounce":
        amp = rng.uniform(6, 10)
        yc = rng.uniform(amp, span_y - amp)
        ys = yc + amp * np.sin(2 * np.pi * t / rng.uniform(8, 12) + rng.uniform(0, 2 * np.pi))
        xs = np.full(n, rng.uniform(0, span_x))
    elif motion == "orbit":
        r = rng.uniform(5, 8)
        xc, yc = rng.uniform(r, span_x - r), rng.uniform(r, span_y - r)
        phase = rng.uniform(0, 2 * np.pi) + 2 * np.pi * t / rng.uniform(10, 14)
        xs, ys = xc + r * np.cos(phase), yc + r * np.sin(phase)
    elif motion == "still":
        xs = np.full(n, rng.uniform(0, span_x))
        ys = np.full(n, rng.uniform(0, span_y))
    else:
        raise InputError(f"unknown motion {motion!r}")
    return np.rint(np.clip(xs, 0, span_x)).astype(int), np.rint(np.clip(ys, 0, span_y)).astype(int)


def _render_video(cls, rng, cfg):
    s, n = cfg.size, cfg.frames_per_video
    coarse = rng.uniform(0, cfg.background_max, size=(s // 4, s // 4))
    background = np.kron(coarse, np.ones((4, 4)))
    frames = np.repeat(background[None, :, :, None], n, axis=0).repeat(3, axis=3).astype(np.float32)
    w = int(rng.integers(cfg.min_actor, cfg.max_actor + 1))
    h = int(rng.integers(cfg.min_actor, cfg.max_actor + 1))
    xs, ys = _trajectory(cls.motion, rng, n, s, w, h)
    base = np.asarray(cls.color, dtype=np.float64)
    color = np.clip(base + (1 - base) * rng.uniform(0, cfg.tint_max, size=3), 0, 1).astype(np.float32)
    # the shared body gives all classes a common actor appearance, as people share one
    # across actions; only the core carries the class colour
    ix, iy = int(round(w * (1 - cfg.core_fraction) / 2)), int(round(h * (1 - cfg.core_fraction) / 2))
    boxes = {}
    for f in range(n):
        x, y = xs[f], ys[f]
        frames[f, y:y + h, x:x + w] = cfg.body_level
        frames[f, y + iy:y + h - iy, x + ix:x + w - ix] = color
        boxes[f] = (float(x), float(y), float(x + w), float(y + h))
    return frames, boxes


def generate_synthetic(config: SyntheticConfig | None = None, seed=0):
    """Moving grey rectangles with class-coloured cores on static textured backgrounds,
    one actor per video.

    Training videos cycle through base classes, test videos through novel classes
    (or all classes when ``test_classes == "all"``).
    """
    cfg = config or SyntheticConfig()
    if cfg.size - cfg.max_actor < MOTION_MARGIN or not 0 < cfg.min_actor <= cfg.max_actor:
        raise InputError(f"frame size {cfg.size} leaves no room for actors up to {cfg.max_actor}px "
                         f"plus {MOTION_MARGIN}px of motion")
    if not 0 < cfg.core_fraction <= 1 or not cfg.background_max < cfg.body_level <= 1:
        raise InputError("actor core fraction must lie in (0, 1] and the body must be brighter than the background")
    rng = np.random.default_rng(seed)
    base = [c for c in cfg.classes if not c.is_novel]
    if not base:
        raise InputError("synthetic config needs at least one base class")
    test_pool = [c for c in cfg.classes if c.is_novel] if cfg.test_classes == "novel" else list(cfg.classes)
    plan = [("train", base[i % len(base)]) for i in range(cfg.train_videos)]
    if test_pool:
        plan += [("test", test_pool[i % len(test_pool)]) for i in range(cfg.test_videos)]
    records, videos = [], {}
    for i, (tag, cls) in enumerate(plan):
        vid = f"{tag}_{i:04d}"
        frames, boxes = _render_video(cls, rng, cfg)
        videos[vid] = frames
        records.append(AnnotationRecord(vid, cfg.frames_per_video, cfg.size, cfg.size,
                                        [AnnotatedTube(cls.name, boxes)], tag))
    return SyntheticDataset(records, videos, list(cfg.classes))


def save_dataset(dataset, root):
    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    save_annotations(dataset.records, root / "annotations.jsonl")
    for vid, frames in dataset.videos.items():
        np.save(root / "videos" / f"{vid}.npy", frames)
    with open(root / "classes.json", "w") as f:
        json.dump({"schema": "openmixer/synthetic-classes", "version": SCHEMA_VERSION,
                   "classes": [asdict(c) for c in dataset.classes]}, f, indent=2)
    save_prompts(dataset.prompts, root / "prompts.json")
    save_split(dataset.split(), root / "split.json")


def load_videos(root, records):
    root = Path(root)
    videos = {}
    for r in records:
        path = root / "videos" / f"{r.video_id}.npy"
        if not path.exists():
            raise InputError(f"missing frames for {r.video_id}: {path}")
        videos[r.video_id] = np.load(path)
    return videos


def load_dataset(root):
    root = Path(root)
    records = load_annotations(root / "annotations.jsonl")
    classes = []
    meta = root / "classes.json"
    if meta.exists():
        with open(meta) as f:
            d = json.load(f)
        classes = [SyntheticClass(c["name"], tuple(c["color"]), c["motion"], c["is_novel"]) for c in d["classes"]]
    return SyntheticDataset(records, load_videos(root, records), classes)

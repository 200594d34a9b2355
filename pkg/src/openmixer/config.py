"""Run configuration: nested dataclasses with YAML load/save and strict key checking."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from dataclasses import asdict, dataclass, field

import yaml

from .backend import BackendConfig
from .errors import ConfigError
from .head import HeadConfig
from .prior import PRIOR_SOURCES, SAMPLING_MODES

TRAINING_MODES = ("e2e", "zsr_tl")


@dataclass
class DataConfig:
    root: str | None = None            # dataset directory (annotations.jsonl, videos/, ...)
    annotations: str | None = None     # overrides <root>/annotations.jsonl
    split: str | None = None           # split JSON; default <root>/split.json
    prompts: str | None = None         # prompt JSON; classes without prompts use the template
    template: str = "a video of person {CLS}"
    clip_len: int = 16
    frame_stride: int = 1
    keyframe_stride: int = 1           # training keyframes: every k-th annotated frame


@dataclass
class ModelConfig:
    prior_source: str = "attention"
    sampling_mode: str = "deterministic"
    sampling_temperature: float = 1.0
    external_boxes: str | None = None  # detection file used by the external prior source
    nms_iou: float | None = 0.5        # per-frame, per-class suppression before linking


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    w1: float = 2.0
    w2: float = 48.0
    cost_score: float = 2.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0
    lr_schedule: str = "constant"      # or "step": x0.1 at lr_drop_epoch
    lr_drop_epoch: int = 10
    log_path: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_every: int = 1


@dataclass
class EvalConfig:
    protocol: str = "base_only"
    iou_threshold: float = 0.5
    person_threshold: float = 0.6
    continuity_iou: float = 0.1
    temporal_only: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    training_mode: str = "e2e"
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.training_mode not in TRAINING_MODES:
            raise ConfigError(f"unknown training mode {self.training_mode!r}")
        if self.model.prior_source not in PRIOR_SOURCES:
            raise ConfigError(f"unknown prior source {self.model.prior_source!r}")
        if self.model.sampling_mode not in SAMPLING_MODES:
            raise ConfigError(f"unknown sampling mode {self.model.sampling_mode!r}")
        if self.train.lr_schedule not in ("constant", "step"):
            raise ConfigError(f"unknown lr schedule {self.train.lr_schedule!r}")
        positive = {
            "data.clip_len": self.data.clip_len, "data.frame_stride": self.data.frame_stride,
            "data.keyframe_stride": self.data.keyframe_stride,
            "train.epochs": self.train.epochs, "train.batch_size": self.train.batch_size,
            "train.lr": self.train.lr, "train.grad_clip": self.train.grad_clip,
            "train.w1": self.train.w1, "train.w2": self.train.w2,
            "train.checkpoint_every": self.train.checkpoint_every,
            "backend.temperature": self.backend.temperature, "backend.patch_size": self.backend.patch_size,
            "backend.dim": self.backend.dim, "head.pyramid_dim": self.head.pyramid_dim,
            "head.qv_points": self.head.qv_points, "model.sampling_temperature": self.model.sampling_temperature,
        }
        bad = [k for k, v in positive.items() if not v > 0]
        if bad:
            raise ConfigError(f"values must be positive: {bad}")
        if self.train.weight_decay < 0:
            raise ConfigError("train.weight_decay must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        sections = {"data": DataConfig, "backend": BackendConfig, "head": HeadConfig,
                    "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
        unknown = set(d) - set(sections) - {"seed", "training_mode", "deterministic"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, kind in sections.items():
            sub = d.get(name) or {}
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            extra = set(sub) - {f.name for f in dataclasses.fields(kind)}
            if extra:
                raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
            kwargs[name] = kind(**sub)
        for key in ("seed", "training_mode", "deterministic"):
            if key in d:
                kwargs[key] = d[key]
        return cls(**kwargs)


def load_config(path):
    with open(path) as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
    return RunConfig.from_dict(raw)


def save_config(config, path):
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)


def synthetic_run_config(text_codes, root=None, seed=0, **sections):
    """Desk-scale settings that train the toy pipeline to convergence in a few minutes on CPU.

    ``sections`` merges extra keys into any section, e.g. ``head={"fusion_mode": "fixed"}``.
    """
    d = {
        "data": {"clip_len": 8, "keyframe_stride": 2},
        "backend": {"patch_size": 8, "dim": 32, "text_codes": dict(text_codes)},
        "head": {"num_queries": 20, "num_stages": 3, "query_dim": 64, "pyramid_dim": 32, "qv_points": 16,
                 "heads": 4},
        "train": {"epochs": 30, "batch_size": 8, "lr": 3e-4},
        "seed": seed,
    }
    if root is not None:
        d["data"].update(root=str(root), prompts=str(Path(root) / "prompts.json"))
    for name, extra in sections.items():
        d.setdefault(name, {}).update(extra)
    return RunConfig.from_dict(d)
